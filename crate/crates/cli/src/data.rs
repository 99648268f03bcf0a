use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::json;

use picoseg::coco::{Annotation, CocoDataset};
use picoseg::imageio::{self, write_pgm, write_ppm};
use picoseg::loss::{write_cache, TeacherRecord};
use picoseg::mask::BinaryMask;
use picoseg::synth::{synth_samples, SceneConfig};
use picoseg::tensor::Tensor;

use crate::error::CliError;

const IMAGE_EXTENSIONS: &[&str] = &["ppm", "png"];

/// Supported image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir.display(), e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_image(path: &Path) -> Result<Tensor, CliError> {
    imageio::read_image(path)
        .map_err(|e| CliError::new("image", format!("{}: {e}", path.display())))
}

/// One annotation with its decoded frame and full-frame ground truth.
pub struct Instance<'a> {
    pub ann: &'a Annotation,
    pub image: &'a Tensor,
    pub truth: BinaryMask,
}

/// Loads every image referenced by `ds` once.
pub fn load_frames(ds: &CocoDataset, images_dir: &Path) -> Result<BTreeMap<u64, Tensor>, CliError> {
    let mut frames = BTreeMap::new();
    for ann in &ds.annotations {
        if frames.contains_key(&ann.image_id) {
            continue;
        }
        let info = ds.image(ann.image_id).ok_or_else(|| {
            CliError::new(
                "coco",
                format!("annotation {} names unknown image {}", ann.id, ann.image_id),
            )
        })?;
        let image = read_image(&images_dir.join(&info.file_name))?;
        if (image.width(), image.height()) != (info.width, info.height) {
            return Err(CliError::new(
                "coco",
                format!(
                    "{} is {}x{}, annotations say {}x{}",
                    info.file_name,
                    image.width(),
                    image.height(),
                    info.width,
                    info.height
                ),
            ));
        }
        frames.insert(ann.image_id, image);
    }
    Ok(frames)
}

pub fn instances<'a>(
    ds: &'a CocoDataset,
    frames: &'a BTreeMap<u64, Tensor>,
) -> Result<Vec<Instance<'a>>, CliError> {
    ds.annotations
        .iter()
        .map(|ann| {
            let image = &frames[&ann.image_id];
            let truth = ann.mask(image.height(), image.width())?;
            Ok(Instance { ann, image, truth })
        })
        .collect()
}

/// `images/`, `masks/`, `annotations.json` and `teacher.ptc` under `out`.
pub fn write_synth_data(seed: u64, n: usize, out: &Path) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    let scene = SceneConfig::default();
    let samples = synth_samples(seed, n, &scene);
    let (img_dir, mask_dir) = (out.join("images"), out.join("masks"));
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| CliError::io(d.display(), e))?;
    }

    let mut images = Vec::with_capacity(n);
    let mut annotations = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for s in &samples {
        let file_name = format!("scene_{:04}.ppm", s.image_id);
        write_ppm(&s.image, img_dir.join(&file_name))?;
        write_pgm(
            &s.mask,
            mask_dir.join(format!("ann_{:04}.pgm", s.annotation_id)),
        )?;
        images.push(json!({
            "id": s.image_id,
            "file_name": file_name,
            "width": scene.width,
            "height": scene.height,
        }));
        annotations.push(json!({
            "id": s.annotation_id,
            "image_id": s.image_id,
            "category_id": 1,
            "iscrowd": 0,
            "area": s.mask.count(),
            "bbox": [s.bbox.x, s.bbox.y, s.bbox.w, s.bbox.h],
            "segmentation": [s.polygon],
        }));
        records.push(TeacherRecord::new(
            s.annotation_id,
            s.teacher_logits.clone(),
            s.confidence,
        )?);
    }
    let coco = json!({
        "images": images,
        "annotations": annotations,
        "categories": [{ "id": 1, "name": "shape" }],
    });
    let json_path = out.join("annotations.json");
    std::fs::write(&json_path, serde_json::to_vec_pretty(&coco)?)
        .map_err(|e| CliError::io(json_path.display(), e))?;
    write_cache(&records, out.join("teacher.ptc"))?;
    log::info!("wrote {n} synthetic scenes to {}", out.display());
    Ok(())
}
