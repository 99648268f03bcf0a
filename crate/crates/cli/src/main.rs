mod commands;
mod data;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "picoseg", version, about = "Box-prompted segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where the model comes from. `--quant` selects the integer path unless
/// `--backend` says otherwise.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Float weights (PSW1)
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Quantized model (PSQ1)
    #[arg(long)]
    pub quant: Option<PathBuf>,
    /// Backend name: fp32, int8 or oracle
    #[arg(long)]
    pub backend: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment one box prompt and write the mask as PGM plus a JSON sidecar
    Infer {
        #[arg(long)]
        image: PathBuf,
        /// Box as x,y,w,h in image pixels
        #[arg(long, value_parser = commands::parse_bbox)]
        bbox: picoseg::roi::BBox,
        #[command(flatten)]
        model: ModelArgs,
        /// Output mask path (.pgm); the sidecar goes next to it as .json
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every annotation of a COCO file and print mIoU / mAP
    Eval {
        #[arg(long)]
        ann: PathBuf,
        #[arg(long)]
        images_dir: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Write the report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate, quantize and export an INT8 model
    Quantize {
        #[arg(long)]
        weights: PathBuf,
        /// Directory of calibration images (PPM or PNG)
        #[arg(long)]
        images_dir: PathBuf,
        /// Number of calibration batches
        #[arg(long, default_value_t = picoseg::quant::DEFAULT_CALIBRATION_BATCHES)]
        batches: usize,
        /// Output PSQ1 path
        #[arg(long)]
        out: PathBuf,
    },
    /// Report parameter count, MACs and file sizes for the default layout
    Count {
        /// Input side length
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune the output head against cached teacher logits
    FitHead {
        /// Starting weights; seeded initialization when omitted
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Initialization seed
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 3e-4)]
        lr: f64,
        /// Synthetic training scenes (ignored with --ann)
        #[arg(long, default_value_t = 32)]
        samples: usize,
        /// Seed of the synthetic training scenes
        #[arg(long, default_value_t = 7)]
        data_seed: u64,
        /// COCO annotations to train on instead of synthetic scenes
        #[arg(long, requires_all = ["images_dir", "cache"])]
        ann: Option<PathBuf>,
        #[arg(long)]
        images_dir: Option<PathBuf>,
        /// Teacher cache (PTC1) matching --ann
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Output PSW1 path
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic teacher cache (PTC1)
    MakeCache {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic scenes, masks, COCO JSON and a teacher cache
    SynthData {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        n: usize,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP gateway
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
        #[command(flatten)]
        model: ModelArgs,
        /// Seed for placeholder weights when no model file is given
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Static UI bundle served at /
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Infer {
            image,
            bbox,
            model,
            out,
        } => commands::infer(&image, bbox, &model, &out),
        Command::Eval {
            ann,
            images_dir,
            model,
            out,
        } => commands::eval(&ann, &images_dir, &model, out.as_deref()),
        Command::Quantize {
            weights,
            images_dir,
            batches,
            out,
        } => commands::quantize(&weights, &images_dir, batches, &out),
        Command::Count { size, out } => commands::count(size, out.as_deref()),
        Command::FitHead {
            weights,
            seed,
            steps,
            lr,
            samples,
            data_seed,
            ann,
            images_dir,
            cache,
            out,
        } => {
            let source = match (ann, images_dir, cache) {
                (Some(ann), Some(images_dir), Some(cache)) => commands::TrainSource::Coco {
                    ann,
                    images_dir,
                    cache,
                },
                _ => commands::TrainSource::Synthetic {
                    seed: data_seed,
                    samples,
                },
            };
            commands::fit_head(weights.as_deref(), seed, steps, lr, &source, &out)
        }
        Command::MakeCache { seed, n, out } => commands::make_cache(seed, n, &out),
        Command::SynthData { seed, n, out } => data::write_synth_data(seed, n, &out),
        Command::Serve {
            listen,
            model,
            seed,
            static_dir,
        } => commands::serve(&listen, &model, seed, static_dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PICOSEG_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(2)
        }
    }
}
