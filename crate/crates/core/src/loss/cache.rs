use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{FormatError, Reader, Writer};
use crate::roi::CropRect;
use crate::synth::{confidence_for_error, random_polygon, teacher_logits, MAX_TEACHER_ERROR};
use crate::tensor::Tensor;

use super::{LossError, Result};

pub const PTC1_MAGIC: &[u8; 4] = b"PTC1";
const PTC1_VERSION: u32 = 1;
/// Side of every cached teacher logit map.
pub const TEACHER_SIZE: usize = 96;

/// Cached teacher prediction for one annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherRecord {
    pub annotation_id: u64,
    /// `(1, 1, 96, 96)`
    pub logits: Tensor,
    pub confidence: f32,
}

impl TeacherRecord {
    pub fn new(annotation_id: u64, logits: Tensor, confidence: f32) -> Result<Self> {
        if logits.shape() != [1, 1, TEACHER_SIZE, TEACHER_SIZE] {
            return Err(LossError::Shape(
                logits.shape(),
                [1, 1, TEACHER_SIZE, TEACHER_SIZE],
            ));
        }
        if !logits.is_finite() {
            return Err(FormatError::Malformed(format!(
                "record {annotation_id}: non-finite logits"
            ))
            .into());
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(FormatError::Malformed(format!(
                "record {annotation_id}: confidence {confidence} outside [0, 1]"
            ))
            .into());
        }
        Ok(Self {
            annotation_id,
            logits,
            confidence,
        })
    }
}

pub fn encode_cache(records: &[TeacherRecord]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(PTC1_MAGIC);
    w.u32(PTC1_VERSION);
    w.u32(records.len() as u32);
    for r in records {
        w.u64(r.annotation_id);
        w.f32(r.confidence);
        w.f32s(r.logits.data());
    }
    w.into_inner()
}

pub fn decode_cache(bytes: &[u8]) -> Result<Vec<TeacherRecord>> {
    let mut r = Reader::new(bytes);
    r.magic(PTC1_MAGIC)?;
    let version = r.u32()?;
    if version != PTC1_VERSION {
        return Err(FormatError::Version(version).into());
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id = r.u64()?;
        let confidence = r.f32()?;
        let data = r.f32s(TEACHER_SIZE * TEACHER_SIZE)?;
        let logits = Tensor::new([1, 1, TEACHER_SIZE, TEACHER_SIZE], data).expect("fixed size");
        out.push(TeacherRecord::new(id, logits, confidence)?);
    }
    r.finish()?;
    Ok(out)
}

pub fn write_cache(records: &[TeacherRecord], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_cache(records))?;
    Ok(())
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<Vec<TeacherRecord>> {
    decode_cache(&std::fs::read(path)?)
}

/// `n` geometric-shape teacher maps drawn directly in crop space.
pub fn synth_cache(seed: u64, n: usize) -> Vec<TeacherRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = TEACHER_SIZE as f64;
    let rect = CropRect {
        x1: 0.0,
        y1: 0.0,
        x2: s,
        y2: s,
        width: s,
        height: s,
    };
    (0..n)
        .map(|i| {
            let (_, poly) = random_polygon(&mut rng, s, s);
            let error = rng.random_range(-MAX_TEACHER_ERROR..MAX_TEACHER_ERROR);
            TeacherRecord {
                annotation_id: i as u64 + 1,
                logits: teacher_logits(&poly, &rect, TEACHER_SIZE, error),
                confidence: confidence_for_error(error),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let recs = synth_cache(7, 3);
        let bytes = encode_cache(&recs);
        assert_eq!(bytes.len(), 12 + 3 * (12 + 4 * 96 * 96));
        assert_eq!(decode_cache(&bytes).unwrap(), recs);
        assert!(matches!(
            decode_cache(&bytes[..bytes.len() - 2]),
            Err(LossError::Format(FormatError::Truncated { .. }))
        ));
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(
            decode_cache(&bad),
            Err(LossError::Format(FormatError::BadMagic { .. }))
        ));
    }

    #[test]
    fn synthetic_cache_contract() {
        let a = synth_cache(7, 10);
        assert_eq!(a, synth_cache(7, 10));
        assert_eq!(a.len(), 10);
        for r in &a {
            assert!((0.6..=1.0).contains(&r.confidence));
            assert!(r.logits.is_finite());
            let (lo, hi) = r.logits.min_max();
            assert!(lo < 0.0 && hi > 0.0);
        }
    }

    #[test]
    fn record_validation() {
        let t = Tensor::zeros([1, 1, 96, 96]);
        assert!(TeacherRecord::new(1, t.clone(), 1.5).is_err());
        assert!(TeacherRecord::new(1, Tensor::zeros([1, 1, 8, 8]), 0.5).is_err());
        assert!(TeacherRecord::new(1, t, 0.5).is_ok());
    }
}
