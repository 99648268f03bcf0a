//! Frame and mask files: binary PPM (P6) and PNG in, PPM and PGM (P5) out.
//! Images become `(1, 3, H, W)` tensors in `[0, 1]`.

use std::path::Path;

use thiserror::Error;

use crate::mask::BinaryMask;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("empty image data")]
    Empty,
    #[error("unsupported image format")]
    Unsupported,
    #[error("malformed PPM: {0}")]
    Ppm(String),
    #[error("PNG decode failed: {0}")]
    Png(String),
    #[error("image must be (1, 3, H, W), got {0:?}")]
    Shape([usize; 4]),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ImageError>;

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

pub fn sniff(bytes: &[u8]) -> Result<ImageFormat> {
    if bytes.is_empty() {
        Err(ImageError::Empty)
    } else if bytes.starts_with(b"P6") {
        Ok(ImageFormat::Ppm)
    } else if bytes.starts_with(PNG_SIGNATURE) {
        Ok(ImageFormat::Png)
    } else {
        Err(ImageError::Unsupported)
    }
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    match sniff(bytes)? {
        ImageFormat::Ppm => decode_ppm(bytes),
        ImageFormat::Png => decode_png(bytes),
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_image(&std::fs::read(path)?)
}

fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Tensor {
    Tensor::from_fn([1, 3, height, width], |[_, c, y, x]| {
        rgb[(y * width + x) * 3 + c] as f32 / 255.0
    })
}

fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ImageError::Png(e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(ImageError::Empty);
    }
    Ok(from_rgb8(w, h, img.as_raw()))
}

/// Reads the next header token, skipping whitespace and `#` comments.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImageError::Ppm("truncated header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ImageError::Ppm(format!("bad {what}")))
}

fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != b"P6" {
        return Err(ImageError::Unsupported);
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(ImageError::Ppm(format!("zero extent {width}x{height}")));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(ImageError::Ppm(format!("maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let need = width * height * 3 * sample_bytes;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| ImageError::Ppm(format!("raster needs {need} bytes")))?;
    let max = maxval as f32;
    let sample = |i: usize| -> f32 {
        let v = if sample_bytes == 1 {
            raster[i] as u32
        } else {
            u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as u32
        };
        (v as f32 / max).min(1.0)
    };
    Ok(Tensor::from_fn([1, 3, height, width], |[_, c, y, x]| {
        sample((y * width + x) * 3 + c)
    }))
}

/// 8-bit P6 encoding of a `(1, 3, H, W)` tensor, values clamped to `[0, 1]`.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [n, c, h, w] = image.shape();
    if n != 1 || c != 3 {
        return Err(ImageError::Shape(image.shape()));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = image.at(0, ch, y, x).clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// P5 encoding: foreground 255, background 0.
pub fn encode_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.data().iter().map(|&v| if v != 0 { 255 } else { 0 }));
    out
}

pub fn write_ppm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn write_pgm(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_pgm(mask))?;
    Ok(())
}
