//! COCO-instances ingestion, mask codecs and the mIoU / mAP harness.
//!
//! mAP here is the success rate averaged over IoU thresholds 0.50..=0.95 in
//! 0.05 steps. Each prompt yields exactly one mask with no confidence
//! ranking, so average precision reduces to recall at each threshold.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::mask::BinaryMask;
use crate::roi::BBox;

#[derive(Debug, Error)]
pub enum CocoError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing top-level key {0:?}")]
    MissingKey(&'static str),
    #[error("RLE counts sum to {sum}, expected {expected}")]
    RleLength { sum: u64, expected: u64 },
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("evaluation needs equally sized, non-empty lists (got {predictions} predictions, {references} references)")]
    EvalInput {
        predictions: usize,
        references: usize,
    },
}

pub type Result<T> = std::result::Result<T, CocoError>;

/// Uncompressed COCO RLE: column-major runs, the first run counts zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Segmentation {
    /// Flat `x, y` coordinate lists, one per polygon.
    Polygons(Vec<Vec<f64>>),
    Rle(Rle),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub bbox: BBox,
    pub segmentation: Segmentation,
}

impl Annotation {
    /// Rasterizes the segmentation onto a `height x width` canvas.
    pub fn mask(&self, height: usize, width: usize) -> Result<BinaryMask> {
        match &self.segmentation {
            Segmentation::Polygons(polys) => Ok(rasterize_polygon((height, width), polys)),
            Segmentation::Rle(rle) => {
                if rle.size != [height, width] {
                    return Err(CocoError::ShapeMismatch(
                        (rle.size[0], rle.size[1]),
                        (height, width),
                    ));
                }
                decode_rle((height, width), &rle.counts)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CocoDataset {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<Annotation>,
    /// Entries skipped because they were malformed.
    pub warnings: usize,
}

impl CocoDataset {
    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.iter().find(|im| im.id == id)
    }
}

pub fn parse_annotations(path: impl AsRef<Path>) -> Result<CocoDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CocoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_annotations_str(&text)
}

pub fn parse_annotations_str(text: &str) -> Result<CocoDataset> {
    let root: Value = serde_json::from_str(text)?;
    let images = root
        .get("images")
        .and_then(Value::as_array)
        .ok_or(CocoError::MissingKey("images"))?;
    let anns = root
        .get("annotations")
        .and_then(Value::as_array)
        .ok_or(CocoError::MissingKey("annotations"))?;

    let mut ds = CocoDataset::default();
    for im in images {
        match parse_image(im) {
            Some(info) => ds.images.push(info),
            None => {
                log::warn!("skipping malformed image entry: {im}");
                ds.warnings += 1;
            }
        }
    }
    for a in anns {
        match parse_annotation(a) {
            Some(ann) => ds.annotations.push(ann),
            None => {
                log::warn!(
                    "skipping malformed annotation: {}",
                    a.get("id").unwrap_or(&Value::Null)
                );
                ds.warnings += 1;
            }
        }
    }
    Ok(ds)
}

fn parse_image(v: &Value) -> Option<ImageInfo> {
    Some(ImageInfo {
        id: v.get("id")?.as_u64()?,
        file_name: v.get("file_name")?.as_str()?.to_owned(),
        width: v.get("width")?.as_u64()? as usize,
        height: v.get("height")?.as_u64()? as usize,
    })
}

fn parse_annotation(v: &Value) -> Option<Annotation> {
    let id = v.get("id")?.as_u64()?;
    let image_id = v.get("image_id")?.as_u64()?;
    let b: Vec<f64> = v
        .get("bbox")?
        .as_array()?
        .iter()
        .map(Value::as_f64)
        .collect::<Option<_>>()?;
    let bbox = match b.as_slice() {
        &[x, y, w, h] => BBox::new(x, y, w, h),
        _ => return None,
    };
    bbox.validate().ok()?;

    let seg = v.get("segmentation")?;
    let segmentation = if let Some(polys) = seg.as_array() {
        let polys: Vec<Vec<f64>> = polys
            .iter()
            .map(|p| {
                p.as_array()?
                    .iter()
                    .map(Value::as_f64)
                    .collect::<Option<Vec<f64>>>()
            })
            .collect::<Option<_>>()?;
        if polys.is_empty() || polys.iter().any(|p| p.len() < 6 || p.len() % 2 != 0) {
            return None;
        }
        Segmentation::Polygons(polys)
    } else {
        let size: Vec<usize> = seg
            .get("size")?
            .as_array()?
            .iter()
            .map(|s| s.as_u64().map(|s| s as usize))
            .collect::<Option<_>>()?;
        let counts: Vec<u64> = seg
            .get("counts")?
            .as_array()?
            .iter()
            .map(Value::as_u64)
            .collect::<Option<_>>()?;
        let size = match size.as_slice() {
            &[h, w] => [h, w],
            _ => return None,
        };
        if counts.iter().sum::<u64>() != (size[0] * size[1]) as u64 {
            return None;
        }
        Segmentation::Rle(Rle { size, counts })
    };
    Some(Annotation {
        id,
        image_id,
        bbox,
        segmentation,
    })
}

pub fn decode_rle(size: (usize, usize), counts: &[u64]) -> Result<BinaryMask> {
    let (h, w) = size;
    let expected = (h * w) as u64;
    let sum: u64 = counts.iter().sum();
    if sum != expected {
        return Err(CocoError::RleLength { sum, expected });
    }
    let mut mask = BinaryMask::zeros(h, w);
    let mut pos = 0usize;
    for (i, &run) in counts.iter().enumerate() {
        let fg = i % 2 == 1;
        for p in pos..pos + run as usize {
            if fg {
                // column-major position -> (row, col)
                mask.set(p % h, p / h, true);
            }
        }
        pos += run as usize;
    }
    Ok(mask)
}

pub fn encode_rle(mask: &BinaryMask) -> Rle {
    let (h, w) = (mask.height(), mask.width());
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for c in 0..w {
        for r in 0..h {
            let v = mask.get(r, c);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle {
        size: [h, w],
        counts,
    }
}

/// Even-odd test of the point against one flat `x, y` polygon.
pub fn point_in_polygon(px: f64, py: f64, poly: &[f64]) -> bool {
    let n = poly.len() / 2;
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (poly[2 * i], poly[2 * i + 1]);
        let (xj, yj) = (poly[2 * j], poly[2 * j + 1]);
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Pixel `(r, c)` is set iff its centre `(c + 0.5, r + 0.5)` falls inside
/// any of the polygons.
pub fn rasterize_polygon(size: (usize, usize), polygons: &[Vec<f64>]) -> BinaryMask {
    let (h, w) = size;
    let mut mask = BinaryMask::zeros(h, w);
    for poly in polygons.iter().filter(|p| p.len() >= 6) {
        let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
        for pt in poly.chunks(2) {
            ymin = ymin.min(pt[1]);
            ymax = ymax.max(pt[1]);
        }
        let r0 = (ymin - 0.5).floor().max(0.0) as usize;
        let r1 = ((ymax - 0.5).ceil().max(0.0) as usize + 1).min(h);
        for r in r0..r1 {
            for c in 0..w {
                if point_in_polygon(c as f64 + 0.5, r as f64 + 0.5, poly) {
                    mask.set(r, c, true);
                }
            }
        }
    }
    mask
}

/// Intersection over union; two empty masks score 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(CocoError::ShapeMismatch(
            (a.height(), a.width()),
            (b.height(), b.width()),
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += usize::from(x & y);
        union += usize::from(x | y);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub id: u64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub map: f64,
    pub per_instance: Vec<InstanceScore>,
    pub thresholds: Vec<f64>,
}

/// `0.50, 0.55, ..., 0.95`
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Aggregates already-computed per-instance IoUs.
pub fn report_from_scores(mut scores: Vec<InstanceScore>) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(CocoError::EvalInput {
            predictions: 0,
            references: 0,
        });
    }
    scores.sort_by_key(|s| s.id);
    let n = scores.len() as f64;
    let miou = scores.iter().map(|s| s.iou).sum::<f64>() / n;
    let thresholds = map_thresholds();
    let map = thresholds
        .iter()
        .map(|&t| scores.iter().filter(|s| s.iou >= t).count() as f64 / n)
        .sum::<f64>()
        / thresholds.len() as f64;
    Ok(EvalReport {
        miou,
        map,
        per_instance: scores,
        thresholds,
    })
}

/// Scores prediction `i` against reference `i`; instance ids are list indices.
pub fn evaluate(predictions: &[BinaryMask], references: &[BinaryMask]) -> Result<EvalReport> {
    if predictions.is_empty() || predictions.len() != references.len() {
        return Err(CocoError::EvalInput {
            predictions: predictions.len(),
            references: references.len(),
        });
    }
    let scores = predictions
        .iter()
        .zip(references)
        .enumerate()
        .map(|(i, (p, r))| {
            Ok(InstanceScore {
                id: i as u64,
                iou: iou(p, r)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    report_from_scores(scores)
}
