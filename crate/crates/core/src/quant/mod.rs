//! INT8 post-training quantization.
//!
//! Weights are quantized symmetrically per output channel (codes in
//! `[-127, 127]`, zero-point 0). Activations are quantized per tensor with an
//! affine `(scale, zero_point)` pair taken from min/max calibration. The
//! integer path accumulates `(q_in - zp_in) * q_w` in `i32` and requantizes
//! through a float multiplier.

mod exec;
mod format;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::FormatError;
use crate::net::{NetError, NetSpec, Network, NodeOp, WeightStore, ECA_GATE_SITE};
use crate::tensor::Tensor;

pub use exec::{qconv, QTensor, QuantizedNetwork};
pub use format::{decode_int8, encode_int8, export_int8, import_int8, PSQ1_MAGIC, PSQ1_VERSION};

/// Representative batches used when no count is given.
pub const DEFAULT_CALIBRATION_BATCHES: usize = 10;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("layer {0} has a non-finite weight")]
    NonFinite(String),
    #[error("no activation parameters for site {0}")]
    MissingSite(String),
    #[error("no quantized layer {0}")]
    MissingLayer(String),
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("calibration batch shape {actual:?} does not match (N, 3, {size}, {size})")]
    CalibrationShape { size: usize, actual: [usize; 4] },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QuantError>;

/// Round half away from zero.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// One weight tensor as int8 codes with a scale per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayer {
    pub name: String,
    pub shape: [usize; 4],
    pub scales: Vec<f32>,
    pub codes: Vec<i8>,
}

impl QuantLayer {
    pub fn channel_len(&self) -> usize {
        self.codes.len() / self.shape[0]
    }

    pub fn dequantize(&self) -> Tensor {
        let per = self.channel_len();
        let data = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, &q)| self.scales[i / per] * q as f32)
            .collect();
        Tensor::new(self.shape, data).expect("codes cover the shape")
    }
}

/// Symmetric per-channel quantization of one tensor along axis 0.
pub fn quantize_tensor(name: &str, t: &Tensor) -> Result<QuantLayer> {
    if !t.is_finite() {
        return Err(QuantError::NonFinite(name.to_string()));
    }
    let shape = t.shape();
    let per = t.len() / shape[0];
    let mut scales = Vec::with_capacity(shape[0]);
    let mut codes = Vec::with_capacity(t.len());
    for ch in t.data().chunks(per) {
        let max = ch.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        let scale = if max == 0.0 { 1.0 } else { max / 127.0 };
        scales.push(scale);
        codes.extend(
            ch.iter()
                .map(|&v| round_half_away(v as f64 / scale as f64).clamp(-127.0, 127.0) as i8),
        );
    }
    Ok(QuantLayer {
        name: name.to_string(),
        shape,
        scales,
        codes,
    })
}

/// Quantized counterpart of a [`WeightStore`]. Per-channel weight scales
/// live on the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Int8Store {
    pub fingerprint: u64,
    pub layers: Vec<QuantLayer>,
}

impl Int8Store {
    pub fn get(&self, name: &str) -> Option<&QuantLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&QuantLayer> {
        self.get(name)
            .ok_or_else(|| QuantError::MissingLayer(name.to_string()))
    }

    pub fn dequantize(&self) -> Result<WeightStore> {
        let entries = self
            .layers
            .iter()
            .map(|l| (l.name.clone(), l.dequantize()))
            .collect();
        Ok(WeightStore::new(self.fingerprint, entries)?)
    }

    pub fn payload_bytes(&self) -> usize {
        self.layers.iter().map(|l| l.codes.len()).sum()
    }
}

pub fn quantize_weights(store: &WeightStore) -> Result<Int8Store> {
    let layers = store
        .entries()
        .iter()
        .map(|(name, t)| quantize_tensor(name, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(Int8Store {
        fingerprint: store.fingerprint(),
        layers,
    })
}

/// Affine per-tensor activation quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl ActParams {
    /// Maps `[min, max]` onto the signed code range `[-128, 127]`.
    pub fn from_range(min: f32, max: f32) -> Self {
        let scale = (max - min) / 255.0;
        if scale.is_nan() || scale <= 0.0 || !scale.is_finite() {
            return Self {
                scale: 1.0,
                zero_point: 0,
            };
        }
        let zp = round_half_away(-(min as f64) / scale as f64) - 128.0;
        Self {
            scale,
            zero_point: zp.clamp(-128.0, 127.0) as i32,
        }
    }

    #[inline]
    pub fn quantize(&self, v: f32) -> i8 {
        let q = round_half_away(v as f64 / self.scale as f64) + self.zero_point as f64;
        q.clamp(-128.0, 127.0) as i8
    }

    #[inline]
    pub fn dequantize(&self, q: i8) -> f32 {
        self.scale * (q as i32 - self.zero_point) as f32
    }
}

/// Activation parameters for every quantization site, keyed by site name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub activations: BTreeMap<String, ActParams>,
}

impl QuantParams {
    pub fn site(&self, name: &str) -> Result<ActParams> {
        self.activations
            .get(name)
            .copied()
            .ok_or_else(|| QuantError::MissingSite(name.to_string()))
    }
}

/// Names of every activation site the integer path needs for `spec`.
/// Upsampling reuses its source's parameters and has no site of its own.
pub fn activation_sites(spec: &NetSpec) -> Result<Vec<String>> {
    let plan = crate::net::Plan::new(spec)?;
    let mut sites = Vec::new();
    for n in &plan.nodes {
        match n.op {
            NodeOp::Upsample { .. } => {}
            NodeOp::Eca { .. } => {
                sites.push(ECA_GATE_SITE.to_string());
                sites.push(n.name.clone());
            }
            _ => sites.push(n.name.clone()),
        }
    }
    Ok(sites)
}

/// Representative input batches, each `(N, 3, S, S)`.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    batches: Vec<Tensor>,
}

impl CalibrationSet {
    pub fn new(batches: Vec<Tensor>) -> Result<Self> {
        if batches.is_empty() || batches.iter().any(|b| b.batch() == 0) {
            return Err(QuantError::EmptyCalibration);
        }
        Ok(Self { batches })
    }

    pub fn batches(&self) -> &[Tensor] {
        &self.batches
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// The first `n` batches.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        Self::new(self.batches[..n.min(self.batches.len())].to_vec())
    }
}

/// Observed extremes at one activation site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActRange {
    pub min: f32,
    pub max: f32,
}

impl ActRange {
    pub fn contains(&self, other: &ActRange) -> bool {
        self.min <= other.min && self.max >= other.max
    }
}

/// Runs the float network over every batch and records min/max per site.
pub fn observe_ranges(
    spec: &NetSpec,
    weights: &WeightStore,
    calib: &CalibrationSet,
) -> Result<BTreeMap<String, ActRange>> {
    let s = spec.input_size;
    for b in calib.batches() {
        let [_, c, h, w] = b.shape();
        if (c, h, w) != (3, s, s) {
            return Err(QuantError::CalibrationShape {
                size: s,
                actual: b.shape(),
            });
        }
    }
    let net = Network::new(spec.clone(), weights.clone())?;
    let mut ranges: BTreeMap<String, ActRange> = BTreeMap::new();
    for batch in calib.batches() {
        net.forward_observed(batch, &mut |name, t| {
            let (lo, hi) = t.min_max();
            ranges
                .entry(name.to_string())
                .and_modify(|r| {
                    r.min = r.min.min(lo);
                    r.max = r.max.max(hi);
                })
                .or_insert(ActRange { min: lo, max: hi });
        })?;
    }
    Ok(ranges)
}

/// Activation parameters for every site from min/max calibration.
pub fn calibrate(
    spec: &NetSpec,
    weights: &WeightStore,
    calib: &CalibrationSet,
) -> Result<QuantParams> {
    let ranges = observe_ranges(spec, weights, calib)?;
    let activations = activation_sites(spec)?
        .into_iter()
        .map(|site| {
            let r = ranges
                .get(&site)
                .ok_or_else(|| QuantError::MissingSite(site.clone()))?;
            Ok((site, ActParams::from_range(r.min, r.max)))
        })
        .collect::<Result<_>>()?;
    Ok(QuantParams { activations })
}

/// Logit gap between the float and integer paths over a set of inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub mean_abs_gap: f64,
    pub max_abs_gap: f64,
    /// Fraction of pixels whose `> 0` mask decision matches.
    pub sign_agreement: f64,
    pub pixels: usize,
}

pub fn measure_divergence(
    float: &Network,
    int8: &QuantizedNetwork,
    inputs: &[Tensor],
) -> Result<Divergence> {
    let (mut sum, mut max, mut agree, mut pixels) = (0.0f64, 0.0f64, 0usize, 0usize);
    for x in inputs {
        let a = float.forward(x)?;
        let b = int8.forward(x)?;
        for (&u, &v) in a.data().iter().zip(b.data()) {
            let gap = (u - v).abs() as f64;
            sum += gap;
            max = max.max(gap);
            agree += usize::from((u > 0.0) == (v > 0.0));
        }
        pixels += a.len();
    }
    if pixels == 0 {
        return Err(QuantError::EmptyCalibration);
    }
    Ok(Divergence {
        mean_abs_gap: sum / pixels as f64,
        max_abs_gap: max,
        sign_agreement: agree as f64 / pixels as f64,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_channel_example() {
        let t = Tensor::new([1, 1, 1, 3], vec![-1.27, 0.0, 1.27]).unwrap();
        let q = quantize_tensor("w", &t).unwrap();
        assert!((q.scales[0] - 0.01).abs() < 1e-9);
        assert_eq!(q.codes, vec![-127, 0, 127]);
    }

    #[test]
    fn zero_channel_gets_unit_scale() {
        let t = Tensor::new([2, 1, 1, 2], vec![0.0, 0.0, 0.5, -0.25]).unwrap();
        let q = quantize_tensor("w", &t).unwrap();
        assert_eq!(q.scales[0], 1.0);
        assert_eq!(&q.codes[..2], &[0, 0]);
        assert_eq!(&q.dequantize().data()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_is_rejected() {
        let t = Tensor::new([1, 1, 1, 2], vec![f32::NAN, 1.0]).unwrap();
        assert!(matches!(quantize_tensor("bad", &t), Err(QuantError::NonFinite(n)) if n == "bad"));
    }

    #[test]
    fn activation_range_examples() {
        let p = ActParams::from_range(0.0, 2.55);
        assert!((p.scale - 0.01).abs() < 1e-8);
        assert_eq!(p.zero_point, -128);
        assert_eq!(p.quantize(0.0), -128);
        assert_eq!(p.quantize(2.55), 127);
        assert_eq!(
            ActParams::from_range(0.7, 0.7),
            ActParams {
                scale: 1.0,
                zero_point: 0
            }
        );
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round_half_away(2.5), 3.0);
        assert_eq!(round_half_away(-2.5), -3.0);
        assert_eq!(round_half_away(-0.4), -0.0);
    }
}
