use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde_json::{json, Value};

use picoseg::backend::{run_prompt, BackendRegistry, ModelArtifacts, ModelInfo, SegmentBackend};
use picoseg::coco::{iou, parse_annotations, report_from_scores, InstanceScore};
use picoseg::imageio::write_pgm;
use picoseg::loss::{
    fit_head as fit, synth_cache, write_cache, FitConfig, TeacherRecord, TrainSample,
};
use picoseg::net::{build, load_weights_for, save_weights, NetSpec, Network};
use picoseg::quant::{
    calibrate, export_int8, import_int8, measure_divergence, quantize_weights, CalibrationSet,
    QuantizedNetwork,
};
use picoseg::roi::{self, BBox, CropRect, PromptConfig};
use picoseg::synth::{synth_samples, SceneConfig};
use picoseg::tensor::Tensor;
use picoseg_gateway::{AppState, SystemClock};

use crate::data::{self, Instance};
use crate::error::CliError;
use crate::ModelArgs;

/// Window used for the smoothed loss ratio in fit-head reports.
const SMOOTHING_WINDOW: usize = 20;

pub fn parse_bbox(s: &str) -> Result<BBox, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("expected x,y,w,h: {e}"))?;
    match parts.as_slice() {
        &[x, y, w, h] => Ok(BBox::new(x, y, w, h)),
        _ => Err(format!(
            "expected 4 comma-separated numbers, got {}",
            parts.len()
        )),
    }
}

fn emit(report: &Value, out: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(report)?;
    match out {
        Some(path) => {
            std::fs::write(path, text + "\n").map_err(|e| CliError::io(path.display(), e))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}").map_err(|e| CliError::io("stdout", e))
        }
    }
}

fn load_model(args: &ModelArgs) -> Result<(ModelArtifacts, String), CliError> {
    let spec = NetSpec::default();
    let mut arts = ModelArtifacts::new(spec.clone());
    if let Some(path) = &args.weights {
        arts.weights = Some(load_weights_for(path, &spec)?);
    }
    if let Some(path) = &args.quant {
        arts.int8 = Some(import_int8(path, &spec)?);
    }
    let name = match (&args.backend, &args.quant) {
        (Some(b), _) => b.clone(),
        (None, Some(_)) => "int8".to_string(),
        (None, None) => "fp32".to_string(),
    };
    Ok((arts, name))
}

fn make_backend(args: &ModelArgs) -> Result<Box<dyn SegmentBackend>, CliError> {
    let (arts, name) = load_model(args)?;
    Ok(BackendRegistry::default().create(&name, &arts)?)
}

pub fn infer(image: &Path, bbox: BBox, model: &ModelArgs, out: &Path) -> Result<(), CliError> {
    let backend = make_backend(model)?;
    let frame = data::read_image(image)?;
    let result = run_prompt(backend.as_ref(), &frame, bbox, None)?;
    write_pgm(&result.mask, out)?;
    let sidecar = json!({
        "latency_ms": result.latency_ms,
        "rect": result.rect,
        "mask": { "width": result.mask.width(), "height": result.mask.height(), "foreground": result.mask.count() },
        "params_used": {
            "backend": backend.name(),
            "weights": model.weights,
            "quant": model.quant,
            "input_size": backend.spec().input_size,
            "padding": PromptConfig::default().padding,
            "bbox": bbox,
        },
    });
    emit(&sidecar, Some(&out.with_extension("json")))?;
    log::info!(
        "mask written to {} in {:.1} ms",
        out.display(),
        result.latency_ms
    );
    Ok(())
}

fn score(backend: &dyn SegmentBackend, inst: &Instance) -> Result<InstanceScore, CliError> {
    let result = run_prompt(backend, inst.image, inst.ann.bbox, Some(&inst.truth))?;
    Ok(InstanceScore {
        id: inst.ann.id,
        iou: iou(&result.frame_mask(), &inst.truth)?,
    })
}

pub fn eval(
    ann: &Path,
    images_dir: &Path,
    model: &ModelArgs,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let backend = make_backend(model)?;
    let ds = parse_annotations(ann)?;
    if ds.annotations.is_empty() {
        return Err(CliError::new(
            "coco",
            format!("{} has no usable annotations", ann.display()),
        ));
    }
    let frames = data::load_frames(&ds, images_dir)?;
    let items = data::instances(&ds, &frames)?;
    let start = Instant::now();
    let scores = items
        .par_iter()
        .map(|inst| score(backend.as_ref(), inst))
        .collect::<Result<Vec<_>, _>>()?;
    log::info!(
        "scored {} instances in {:.2?}",
        scores.len(),
        start.elapsed()
    );
    let report = report_from_scores(scores)?;
    let mut value = serde_json::to_value(&report)?;
    value["backend"] = json!(backend.name());
    value["skipped"] = json!(ds.warnings);
    emit(&value, out)
}

/// Each image resized whole to the network input.
fn calibration_crops(images_dir: &Path, size: usize) -> Result<Vec<Tensor>, CliError> {
    let files = data::list_images(images_dir)?;
    files
        .iter()
        .map(|path| {
            let img = data::read_image(path)?;
            let (w, h) = (img.width() as f64, img.height() as f64);
            let full = CropRect {
                x1: 0.0,
                y1: 0.0,
                x2: w,
                y2: h,
                width: w,
                height: h,
            };
            Ok(roi::crop_resize_image(&img, &full, size)?)
        })
        .collect()
}

pub fn quantize(
    weights: &Path,
    images_dir: &Path,
    batches: usize,
    out: &Path,
) -> Result<(), CliError> {
    if batches == 0 {
        return Err(CliError::usage("--batches must be at least 1"));
    }
    // (1) load the float model
    let spec = NetSpec::default();
    let store = load_weights_for(weights, &spec)?;
    let crops = calibration_crops(images_dir, spec.input_size)?;
    if crops.is_empty() {
        return Err(CliError::new(
            "quant",
            format!(
                "no calibration images (.ppm/.png) in {}",
                images_dir.display()
            ),
        ));
    }
    let used = batches.min(crops.len());
    if used < batches {
        log::warn!(
            "only {} calibration images; using {used} batches",
            crops.len()
        );
    }
    // split into `used` groups whose sizes differ by at most one
    let (base, extra) = (crops.len() / used, crops.len() % used);
    let mut groups = Vec::with_capacity(used);
    let mut start = 0;
    for i in 0..used {
        let end = start + base + usize::from(i < extra);
        groups.push(
            Tensor::stack(&crops[start..end])
                .map_err(|e| CliError::new("tensor", e.to_string()))?,
        );
        start = end;
    }
    let calib = CalibrationSet::new(groups)?;

    // (2) calibrate activations, (3) quantize weights, (4) export
    let params = calibrate(&spec, &store, &calib)?;
    let int8 = quantize_weights(&store)?;
    export_int8(&int8, &params, out)?;

    let float_bytes = store.to_bytes().len();
    let int8_bytes = std::fs::metadata(out)
        .map_err(|e| CliError::io(out.display(), e))?
        .len() as usize;
    let divergence = {
        let float = Network::new(spec.clone(), store)?;
        let q = QuantizedNetwork::new(spec, &int8, params)?;
        let singles: Vec<Tensor> = crops.iter().take(20).cloned().collect();
        measure_divergence(&float, &q, &singles)?
    };
    emit(
        &json!({
            "out": out,
            "calibration_images": crops.len(),
            "batches": calib.len(),
            "fp32_bytes": float_bytes,
            "int8_bytes": int8_bytes,
            "compression": float_bytes as f64 / int8_bytes as f64,
            "size_ratio": int8_bytes as f64 / float_bytes as f64,
            "divergence": divergence,
        }),
        None,
    )
}

pub fn count_report(size: usize) -> Result<Value, CliError> {
    let spec = NetSpec::default().with_input_size(size);
    let fp = ModelInfo::for_spec(&spec, false)?;
    let q = ModelInfo::for_spec(&spec, true)?;
    Ok(json!({
        "input_size": size,
        "params": fp.params,
        "macs": fp.macs,
        "fp32_bytes": fp.size_bytes,
        "int8_bytes": q.size_bytes,
    }))
}

pub fn count(size: usize, out: Option<&Path>) -> Result<(), CliError> {
    emit(&count_report(size)?, out)
}

pub enum TrainSource {
    Synthetic {
        seed: u64,
        samples: usize,
    },
    Coco {
        ann: PathBuf,
        images_dir: PathBuf,
        cache: PathBuf,
    },
}

fn coco_dataset(
    ann: &Path,
    images_dir: &Path,
    cache: &Path,
    size: usize,
) -> Result<Vec<TrainSample>, CliError> {
    let ds = parse_annotations(ann)?;
    let records = picoseg::loss::read_cache(cache)?;
    let frames = data::load_frames(&ds, images_dir)?;
    let cfg = PromptConfig {
        size,
        ..PromptConfig::default()
    };
    data::instances(&ds, &frames)?
        .into_iter()
        .map(|inst| {
            let teacher: &TeacherRecord = records
                .iter()
                .find(|r| r.annotation_id == inst.ann.id)
                .ok_or_else(|| {
                CliError::new(
                    "cache",
                    format!("no teacher record for annotation {}", inst.ann.id),
                )
            })?;
            let (w, h) = (inst.image.width() as f64, inst.image.height() as f64);
            let rect = roi::make_square_roi(inst.ann.bbox, &cfg, (w, h))?;
            Ok(TrainSample {
                image: roi::crop_resize_image(inst.image, &rect, size)?,
                teacher: teacher.clone(),
                gt: roi::crop_resize_mask(&inst.truth.to_tensor(), &rect, size)?,
            })
        })
        .collect()
}

pub fn fit_head(
    weights: Option<&Path>,
    seed: u64,
    steps: usize,
    lr: f64,
    source: &TrainSource,
    out: &Path,
) -> Result<(), CliError> {
    let spec = NetSpec::default();
    let store = match weights {
        Some(p) => load_weights_for(p, &spec)?,
        None => build(&spec, seed)?,
    };
    let dataset = match source {
        TrainSource::Synthetic { seed, samples } => {
            synth_samples(*seed, *samples, &SceneConfig::default())
                .iter()
                .map(|s| TrainSample::from_synth(s, spec.input_size))
                .collect::<Result<Vec<_>, _>>()?
        }
        TrainSource::Coco {
            ann,
            images_dir,
            cache,
        } => coco_dataset(ann, images_dir, cache, spec.input_size)?,
    };
    let cfg = FitConfig {
        steps,
        lr,
        ..FitConfig::default()
    };
    let start = Instant::now();
    let outcome = fit(&spec, store, &dataset, &cfg)?;
    save_weights(&outcome.weights, out)?;
    emit(
        &json!({
            "out": out,
            "samples": dataset.len(),
            "steps": steps,
            "lr": lr,
            "seconds": start.elapsed().as_secs_f64(),
            "initial_loss": outcome.trace.first(),
            "final_loss": outcome.trace.last(),
            "smoothed_ratio": outcome.smoothed_ratio(SMOOTHING_WINDOW),
            "trace": outcome.trace,
        }),
        None,
    )
}

pub fn make_cache(seed: u64, n: usize, out: &Path) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    write_cache(&synth_cache(seed, n), out)?;
    Ok(())
}

pub fn serve(
    listen: &str,
    model: &ModelArgs,
    seed: u64,
    static_dir: Option<PathBuf>,
) -> Result<(), CliError> {
    let backend = if model.weights.is_none() && model.quant.is_none() && model.backend.is_none() {
        log::warn!("no model given; serving untrained weights from seed {seed}");
        let mut arts = ModelArtifacts::new(NetSpec::default());
        arts.weights = Some(build(&arts.spec, seed)?);
        BackendRegistry::default().create("fp32", &arts)?
    } else {
        make_backend(model)?
    };
    let mut state = AppState::new(backend, Arc::new(SystemClock::default()))?;
    if let Some(dir) = static_dir {
        state = state.with_static_dir(dir);
    }
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::io("tokio runtime", e))?;
    runtime
        .block_on(picoseg_gateway::serve(listen, Arc::new(state)))
        .map_err(|e| CliError::io(listen, e))
}
