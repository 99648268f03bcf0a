//! Box prompt -> square crop window, crop extraction and mask post-processing.
//!
//! A box prompt is never fed to the network directly. It is padded, squared
//! around its centre and clamped to the frame; the resulting window is cut
//! out of the image and resized to the network resolution, so the object of
//! interest always sits in the middle of the input.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::BinaryMask;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoiError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("box lies entirely outside the {width}x{height} image")]
    OutsideImage { width: f64, height: f64 },
    #[error("crop window is degenerate after clamping")]
    Degenerate,
    #[error("invalid crop window: {0}")]
    InvalidRect(String),
    #[error("invalid prompt config: {0}")]
    InvalidConfig(String),
    #[error("mask is not binary: found value {0}")]
    NonBinaryMask(f32),
    #[error("expected {expected} tensor, got shape {actual:?}")]
    Shape {
        expected: &'static str,
        actual: [usize; 4],
    },
}

pub type Result<T> = std::result::Result<T, RoiError>;

/// COCO-style box: top-left corner plus extent, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x, self.y, self.w, self.h]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(RoiError::InvalidBox("non-finite coordinate".into()));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(RoiError::InvalidBox(format!(
                "width and height must be positive, got {}x{}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    /// Parses `x,y,w,h`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| RoiError::InvalidBox(format!("{s:?}: {e}")))?;
        match parts.as_slice() {
            &[x, y, w, h] => Ok(Self::new(x, y, w, h)),
            _ => Err(RoiError::InvalidBox(format!("expected x,y,w,h, got {s:?}"))),
        }
    }
}

/// Crop window `[x1, x2) x [y1, y2)` inside a `width x height` frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropRect {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub width: f64,
    pub height: f64,
}

/// Integer pixel window obtained from a [`CropRect`]: start corners floored,
/// end corners ceiled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelWindow {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl CropRect {
    pub fn validate(&self) -> Result<()> {
        let ok = self.x1 >= 0.0
            && self.y1 >= 0.0
            && self.x1 < self.x2
            && self.y1 < self.y2
            && self.x2 <= self.width
            && self.y2 <= self.height;
        if ok {
            Ok(())
        } else {
            Err(RoiError::InvalidRect(format!("{self:?}")))
        }
    }

    pub fn rect_width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn rect_height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn pixel_window(&self) -> PixelWindow {
        let x0 = self.x1.floor() as usize;
        let y0 = self.y1.floor() as usize;
        let x1 = (self.x2.ceil() as usize).min(self.width.ceil() as usize);
        let y1 = (self.y2.ceil() as usize).min(self.height.ceil() as usize);
        PixelWindow {
            x0,
            y0,
            w: x1.saturating_sub(x0).max(1),
            h: y1.saturating_sub(y0).max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Fractional context margin added on each side of the box.
    pub padding: f64,
    /// Network input resolution.
    pub size: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            padding: 0.1,
            size: 96,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.padding.is_nan() || self.padding < 0.0 || !self.padding.is_finite() {
            return Err(RoiError::InvalidConfig(format!("padding {}", self.padding)));
        }
        if self.size < 8 {
            return Err(RoiError::InvalidConfig(format!("size {} < 8", self.size)));
        }
        Ok(())
    }
}

/// Pads the box, squares it around its centre and clamps it to the image.
pub fn make_square_roi(bbox: BBox, cfg: &PromptConfig, image: (f64, f64)) -> Result<CropRect> {
    bbox.validate()?;
    cfg.validate()?;
    let (width, height) = image;
    if !(width > 0.0 && height > 0.0) {
        return Err(RoiError::InvalidConfig(format!(
            "image extent must be positive, got {width}x{height}"
        )));
    }
    if bbox.x >= width || bbox.y >= height || bbox.x + bbox.w <= 0.0 || bbox.y + bbox.h <= 0.0 {
        return Err(RoiError::OutsideImage { width, height });
    }

    let grow = 1.0 + 2.0 * cfg.padding;
    let side = (bbox.w * grow).max(bbox.h * grow);
    let cx = bbox.x + bbox.w / 2.0;
    let cy = bbox.y + bbox.h / 2.0;
    let x1 = cx - side / 2.0;
    let y1 = cy - side / 2.0;
    let x2 = x1 + side;
    let y2 = y1 + side;

    let rect = CropRect {
        x1: x1.max(0.0),
        y1: y1.max(0.0),
        x2: x2.min(width),
        y2: y2.min(height),
        width,
        height,
    };
    if rect.x1 >= rect.x2 || rect.y1 >= rect.y2 {
        return Err(RoiError::Degenerate);
    }
    Ok(rect)
}

/// Linear blend clamped to its endpoints, exact when `a == b`.
#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    let v = a + t * (b - a);
    v.clamp(a.min(b), a.max(b))
}

/// Source coordinate sampled by output index `i` under centre alignment.
#[inline]
fn center_sample(i: usize, scale: f64, len: usize) -> f64 {
    ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64)
}

/// Nearest source index for output index `i` under centre alignment.
#[inline]
fn nearest_index(i: usize, scale: f64, len: usize) -> usize {
    (((i as f64 + 0.5) * scale).floor() as usize).min(len - 1)
}

fn check_window(image: &Tensor, rect: &CropRect) -> Result<PixelWindow> {
    rect.validate()?;
    if rect.x2 > image.width() as f64 || rect.y2 > image.height() as f64 {
        return Err(RoiError::InvalidRect(format!(
            "{rect:?} exceeds {}x{} image",
            image.width(),
            image.height()
        )));
    }
    Ok(rect.pixel_window())
}

/// Cuts the window out of `(1, C, H, W)` and resizes it bilinearly to
/// `size x size`.
pub fn crop_resize_image(image: &Tensor, rect: &CropRect, size: usize) -> Result<Tensor> {
    if image.batch() != 1 {
        return Err(RoiError::Shape {
            expected: "(1, C, H, W)",
            actual: image.shape(),
        });
    }
    let win = check_window(image, rect)?;
    let sy = win.h as f64 / size as f64;
    let sx = win.w as f64 / size as f64;

    let cols: Vec<(usize, usize, f32)> = (0..size)
        .map(|x| {
            let fx = center_sample(x, sx, win.w);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(win.w - 1);
            (win.x0 + x0, win.x0 + x1, (fx - x0 as f64) as f32)
        })
        .collect();

    let mut out = Tensor::zeros([1, image.channels(), size, size]);
    let data = out.data_mut();
    let mut i = 0;
    for c in 0..image.channels() {
        let plane = image.plane(0, c);
        let w = image.width();
        for y in 0..size {
            let fy = center_sample(y, sy, win.h);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(win.h - 1);
            let ty = (fy - y0 as f64) as f32;
            let r0 = &plane[(win.y0 + y0) * w..(win.y0 + y0 + 1) * w];
            let r1 = &plane[(win.y0 + y1) * w..(win.y0 + y1 + 1) * w];
            for &(xa, xb, tx) in &cols {
                let top = lerp(r0[xa], r0[xb], tx);
                let bottom = lerp(r1[xa], r1[xb], tx);
                data[i] = lerp(top, bottom, ty);
                i += 1;
            }
        }
    }
    Ok(out)
}

/// Cuts the window out of a `(1, 1, H, W)` binary mask and resizes it with
/// nearest-neighbour sampling.
pub fn crop_resize_mask(mask: &Tensor, rect: &CropRect, size: usize) -> Result<Tensor> {
    if mask.batch() != 1 || mask.channels() != 1 {
        return Err(RoiError::Shape {
            expected: "(1, 1, H, W)",
            actual: mask.shape(),
        });
    }
    if let Some(&bad) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(RoiError::NonBinaryMask(bad));
    }
    let win = check_window(mask, rect)?;
    let sy = win.h as f64 / size as f64;
    let sx = win.w as f64 / size as f64;
    let cols: Vec<usize> = (0..size)
        .map(|x| win.x0 + nearest_index(x, sx, win.w))
        .collect();
    let w = mask.width();
    let plane = mask.plane(0, 0);
    let mut out = Tensor::zeros([1, 1, size, size]);
    let data = out.data_mut();
    for y in 0..size {
        let sy_idx = win.y0 + nearest_index(y, sy, win.h);
        let row = &plane[sy_idx * w..(sy_idx + 1) * w];
        for (x, &cx) in cols.iter().enumerate() {
            data[y * size + x] = row[cx];
        }
    }
    Ok(out)
}

/// Scales a box from display coordinates to sensor coordinates.
pub fn display_to_sensor(bbox: BBox, display: (f64, f64), sensor: (f64, f64)) -> Result<BBox> {
    bbox.validate()?;
    let (wd, hd) = display;
    let (ws, hs) = sensor;
    if !(wd > 0.0 && hd > 0.0 && ws > 0.0 && hs > 0.0) {
        return Err(RoiError::InvalidConfig(format!(
            "extents must be positive: display {wd}x{hd}, sensor {ws}x{hs}"
        )));
    }
    let kx = ws / wd;
    let ky = hs / hd;
    Ok(BBox::new(
        bbox.x * kx,
        bbox.y * ky,
        bbox.w * kx,
        bbox.h * ky,
    ))
}

/// Thresholds logits at `> 0` and resizes the result to the window's pixel
/// extent.
pub fn postprocess_mask(logits: &Tensor, rect: &CropRect) -> Result<BinaryMask> {
    let [n, c, h, w] = logits.shape();
    if n != 1 || c != 1 || h != w {
        return Err(RoiError::Shape {
            expected: "(1, 1, S, S)",
            actual: logits.shape(),
        });
    }
    let win = rect.pixel_window();
    let sy = h as f64 / win.h as f64;
    let sx = w as f64 / win.w as f64;
    let src = logits.data();
    let cols: Vec<usize> = (0..win.w).map(|x| nearest_index(x, sx, w)).collect();
    let mut data = Vec::with_capacity(win.w * win.h);
    for y in 0..win.h {
        let row = nearest_index(y, sy, h) * w;
        data.extend(cols.iter().map(|&cx| u8::from(src[row + cx] > 0.0)));
    }
    Ok(BinaryMask::from_raw(win.h, win.w, data).expect("window extents match data"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &CropRect, b: [f64; 4]) -> bool {
        [a.x1, a.y1, a.x2, a.y2]
            .iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() < 1e-9)
    }

    #[test]
    fn roi_examples() {
        let cfg = PromptConfig::default();
        let r = make_square_roi(BBox::new(100.0, 50.0, 40.0, 60.0), &cfg, (640.0, 480.0)).unwrap();
        assert!(close(&r, [84.0, 44.0, 156.0, 116.0]), "{r:?}");

        let zero = PromptConfig {
            padding: 0.0,
            size: 96,
        };
        let r = make_square_roi(BBox::new(0.0, 0.0, 10.0, 10.0), &zero, (640.0, 480.0)).unwrap();
        assert!(close(&r, [0.0, 0.0, 10.0, 10.0]), "{r:?}");

        let r = make_square_roi(BBox::new(620.0, 460.0, 40.0, 40.0), &cfg, (640.0, 480.0)).unwrap();
        assert!(close(&r, [616.0, 456.0, 640.0, 480.0]), "{r:?}");
    }

    #[test]
    fn roi_errors() {
        let cfg = PromptConfig::default();
        assert!(matches!(
            make_square_roi(BBox::new(700.0, 10.0, 20.0, 20.0), &cfg, (640.0, 480.0)),
            Err(RoiError::OutsideImage { .. })
        ));
        assert!(matches!(
            make_square_roi(BBox::new(-50.0, 10.0, 20.0, 20.0), &cfg, (640.0, 480.0)),
            Err(RoiError::OutsideImage { .. })
        ));
        assert!(matches!(
            make_square_roi(BBox::new(10.0, 10.0, 0.0, 20.0), &cfg, (640.0, 480.0)),
            Err(RoiError::InvalidBox(_))
        ));
        let bad = PromptConfig {
            padding: 0.1,
            size: 4,
        };
        assert!(make_square_roi(BBox::new(1.0, 1.0, 2.0, 2.0), &bad, (64.0, 64.0)).is_err());
    }

    #[test]
    fn bbox_parse() {
        assert_eq!(
            BBox::parse("1, 2.5,3,4").unwrap(),
            BBox::new(1.0, 2.5, 3.0, 4.0)
        );
        assert!(BBox::parse("1,2,3").is_err());
        assert!(BBox::parse("a,b,c,d").is_err());
    }

    #[test]
    fn bilinear_center_sampling_rows() {
        let img = Tensor::new([1, 1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let rect = CropRect {
            x1: 0.0,
            y1: 0.0,
            x2: 2.0,
            y2: 2.0,
            width: 2.0,
            height: 2.0,
        };
        let out = crop_resize_image(&img, &rect, 4).unwrap();
        for (y, expected) in [0.0, 0.25, 0.75, 1.0].into_iter().enumerate() {
            for x in 0..4 {
                assert_eq!(out.at(0, 0, y, x), expected, "row {y}");
            }
        }
    }

    #[test]
    fn constant_and_identity_resize() {
        let img = Tensor::full([1, 3, 20, 30], 0.37);
        let rect = CropRect {
            x1: 2.5,
            y1: 3.2,
            x2: 17.9,
            y2: 19.0,
            width: 30.0,
            height: 20.0,
        };
        let out = crop_resize_image(&img, &rect, 24).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.37));

        let img = Tensor::from_fn([1, 3, 8, 8], |[_, c, y, x]| (c * 64 + y * 8 + x) as f32);
        let full = CropRect {
            x1: 0.0,
            y1: 0.0,
            x2: 8.0,
            y2: 8.0,
            width: 8.0,
            height: 8.0,
        };
        assert_eq!(crop_resize_image(&img, &full, 8).unwrap(), img);
    }

    #[test]
    fn mask_resize_keeps_center_pixel() {
        let mut m = Tensor::zeros([1, 1, 40, 40]);
        let i = m.index(0, 0, 14, 14);
        m.data_mut()[i] = 1.0;
        let rect = CropRect {
            x1: 10.0,
            y1: 10.0,
            x2: 19.0,
            y2: 19.0,
            width: 40.0,
            height: 40.0,
        };
        let out = crop_resize_mask(&m, &rect, 96).unwrap();
        assert!(out.data().contains(&1.0));
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 1.0));

        let ones = Tensor::full([1, 1, 10, 10], 1.0);
        let rect = CropRect {
            x1: 1.0,
            y1: 1.0,
            x2: 7.0,
            y2: 9.0,
            width: 10.0,
            height: 10.0,
        };
        assert!(crop_resize_mask(&ones, &rect, 16)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));

        let bad = Tensor::full([1, 1, 10, 10], 0.5);
        assert!(matches!(
            crop_resize_mask(&bad, &rect, 16),
            Err(RoiError::NonBinaryMask(_))
        ));
    }

    #[test]
    fn display_transform() {
        let full = display_to_sensor(
            BBox::new(0.0, 0.0, 640.0, 480.0),
            (640.0, 480.0),
            (4056.0, 3040.0),
        )
        .unwrap();
        assert_eq!(full, BBox::new(0.0, 0.0, 4056.0, 3040.0));
        let b = display_to_sensor(
            BBox::new(64.0, 48.0, 64.0, 48.0),
            (640.0, 480.0),
            (4056.0, 3040.0),
        )
        .unwrap();
        for (got, want) in [(b.x, 405.6), (b.y, 304.0), (b.w, 405.6), (b.h, 304.0)] {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        let back = display_to_sensor(b, (4056.0, 3040.0), (640.0, 480.0)).unwrap();
        let again = display_to_sensor(back, (640.0, 480.0), (4056.0, 3040.0)).unwrap();
        assert!((again.x - b.x).abs() < 1e-9 && (again.h - b.h).abs() < 1e-9);
        assert!(display_to_sensor(
            BBox::new(1.0, 1.0, 0.0, 1.0),
            (640.0, 480.0),
            (4056.0, 3040.0)
        )
        .is_err());
    }

    #[test]
    fn postprocess_thresholds_strictly() {
        let rect = CropRect {
            x1: 0.0,
            y1: 0.0,
            x2: 48.0,
            y2: 32.0,
            width: 100.0,
            height: 100.0,
        };
        let neg = Tensor::full([1, 1, 96, 96], -0.5);
        let m = postprocess_mask(&neg, &rect).unwrap();
        assert_eq!((m.width(), m.height()), (48, 32));
        assert_eq!(m.count(), 0);

        let zero = Tensor::zeros([1, 1, 96, 96]);
        assert_eq!(postprocess_mask(&zero, &rect).unwrap().count(), 0);

        let pos = Tensor::full([1, 1, 96, 96], 0.1);
        let m = postprocess_mask(&pos, &rect).unwrap();
        assert_eq!(m.count(), 48 * 32);
    }
}
