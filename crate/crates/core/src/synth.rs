//! Seeded synthetic scenes: one filled polygon on a noise background, with
//! its COCO annotation and a teacher-style logit map for the prompt crop.
//!
//! Teacher logits are the signed distance to the shape boundary (positive
//! inside, in crop pixels) times [`LOGIT_SCALE`], after shifting the boundary
//! by a per-record error. Confidence falls linearly from 1.0 to 0.6 as that
//! error grows to [`MAX_TEACHER_ERROR`].

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coco::{point_in_polygon, rasterize_polygon};
use crate::mask::BinaryMask;
use crate::roi::{make_square_roi, BBox, CropRect, PromptConfig};
use crate::tensor::Tensor;

pub const LOGIT_SCALE: f64 = 0.5;
pub const LOGIT_CLAMP: f64 = 8.0;
/// Largest boundary shift of a synthetic teacher, in crop pixels.
pub const MAX_TEACHER_ERROR: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Triangle,
    Ellipse,
}

/// Random convex-ish polygon inside `[0, w) x [0, h)` (flat `x, y` list).
pub fn random_polygon(rng: &mut impl Rng, w: f64, h: f64) -> (ShapeKind, Vec<f64>) {
    let kind = match rng.random_range(0..3) {
        0 => ShapeKind::Rectangle,
        1 => ShapeKind::Triangle,
        _ => ShapeKind::Ellipse,
    };
    let min_side = w.min(h);
    let rx = rng.random_range(0.12..0.3) * min_side;
    let ry = rng.random_range(0.12..0.3) * min_side;
    let cx = rng.random_range(rx + 2.0..w - rx - 2.0);
    let cy = rng.random_range(ry + 2.0..h - ry - 2.0);
    let poly = match kind {
        ShapeKind::Rectangle => vec![
            cx - rx,
            cy - ry,
            cx + rx,
            cy - ry,
            cx + rx,
            cy + ry,
            cx - rx,
            cy + ry,
        ],
        ShapeKind::Triangle => {
            let rot = rng.random_range(0.0..2.0 * PI);
            (0..3)
                .flat_map(|i| {
                    let a = rot + i as f64 * 2.0 * PI / 3.0;
                    [cx + rx * a.cos(), cy + ry * a.sin()]
                })
                .collect()
        }
        ShapeKind::Ellipse => (0..24)
            .flat_map(|i| {
                let a = i as f64 * 2.0 * PI / 24.0;
                [cx + rx * a.cos(), cy + ry * a.sin()]
            })
            .collect(),
    };
    (kind, poly)
}

pub fn polygon_bbox(poly: &[f64]) -> BBox {
    let (mut x0, mut y0, mut x1, mut y1) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for pt in poly.chunks(2) {
        x0 = x0.min(pt[0]);
        x1 = x1.max(pt[0]);
        y0 = y0.min(pt[1]);
        y1 = y1.max(pt[1]);
    }
    BBox::new(x0, y0, x1 - x0, y1 - y0)
}

fn segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (ax + t * dx, ay + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Distance to the polygon boundary, positive inside.
pub fn signed_distance(px: f64, py: f64, poly: &[f64]) -> f64 {
    let n = poly.len() / 2;
    let d = (0..n)
        .map(|i| {
            let j = (i + 1) % n;
            segment_distance(
                px,
                py,
                poly[2 * i],
                poly[2 * i + 1],
                poly[2 * j],
                poly[2 * j + 1],
            )
        })
        .fold(f64::INFINITY, f64::min);
    if point_in_polygon(px, py, poly) {
        d
    } else {
        -d
    }
}

/// Teacher logits on a `size x size` grid covering `rect` (centre-sampled),
/// with the boundary pushed outward by `error` crop pixels.
pub fn teacher_logits(poly: &[f64], rect: &CropRect, size: usize, error: f64) -> Tensor {
    let win = rect.pixel_window();
    let sx = win.w as f64 / size as f64;
    let sy = win.h as f64 / size as f64;
    let px_per_crop = sx.max(sy);
    Tensor::from_fn([1, 1, size, size], |[_, _, y, x]| {
        let ix = win.x0 as f64 + (x as f64 + 0.5) * sx;
        let iy = win.y0 as f64 + (y as f64 + 0.5) * sy;
        let d = signed_distance(ix, iy, poly) / px_per_crop + error;
        (d * LOGIT_SCALE).clamp(-LOGIT_CLAMP, LOGIT_CLAMP) as f32
    })
}

pub fn confidence_for_error(error: f64) -> f32 {
    (1.0 - 0.4 * (error.abs() / MAX_TEACHER_ERROR).min(1.0)) as f32
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub annotation_id: u64,
    pub image_id: u64,
    /// `(1, 3, H, W)` in `[0, 1]`.
    pub image: Tensor,
    pub polygon: Vec<f64>,
    pub bbox: BBox,
    pub mask: BinaryMask,
    pub teacher_logits: Tensor,
    pub confidence: f32,
    pub rect: CropRect,
}

#[derive(Debug, Clone, Copy)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub prompt: PromptConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            prompt: PromptConfig::default(),
        }
    }
}

/// `n` single-object scenes; ids start at 1. Deterministic in `seed`.
pub fn synth_samples(seed: u64, n: usize, cfg: &SceneConfig) -> Vec<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (w, h) = (cfg.width, cfg.height);
            let (_, polygon) = random_polygon(&mut rng, w as f64, h as f64);
            let mask = rasterize_polygon((h, w), std::slice::from_ref(&polygon));
            let fg: [f32; 3] = [
                rng.random_range(0.55..1.0),
                rng.random_range(0.55..1.0),
                rng.random_range(0.55..1.0),
            ];
            let mut image = Tensor::zeros([1, 3, h, w]);
            for (c, &base) in fg.iter().enumerate() {
                for y in 0..h {
                    for x in 0..w {
                        let noise: f32 = rng.random_range(0.0..0.35);
                        let v = if mask.get(y, x) {
                            base - 0.5 * noise
                        } else {
                            noise
                        };
                        let idx = image.index(0, c, y, x);
                        image.data_mut()[idx] = v.clamp(0.0, 1.0);
                    }
                }
            }
            let bbox = polygon_bbox(&polygon);
            let rect = make_square_roi(bbox, &cfg.prompt, (w as f64, h as f64))
                .expect("shapes lie inside the frame");
            let error = rng.random_range(-MAX_TEACHER_ERROR..MAX_TEACHER_ERROR);
            SynthSample {
                annotation_id: i as u64 + 1,
                image_id: i as u64 + 1,
                teacher_logits: teacher_logits(&polygon, &rect, cfg.prompt.size, error),
                confidence: confidence_for_error(error),
                image,
                polygon,
                bbox,
                mask,
                rect,
            }
        })
        .collect()
}
