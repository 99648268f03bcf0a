//! Segmentation backends selectable by name, and the prompt pipeline that
//! drives them.
//!
//! A backend turns a `(1, 3, S, S)` prompt crop into `(1, 1, S, S)` logits.
//! The default registry knows `"fp32"` (float network), `"int8"` (integer
//! path) and `"oracle"` (echoes the ground-truth crop, for harness checks).

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::BinaryMask;
use crate::net::{NetError, NetSpec, Network, WeightStore};
use crate::quant::{self, Int8Store, QuantError, QuantParams, QuantizedNetwork};
use crate::roi::{self, BBox, CropRect, PromptConfig, RoiError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("unknown backend {0:?}")]
    Unknown(String),
    #[error("backend {backend} needs {artifact}")]
    MissingArtifact {
        backend: &'static str,
        artifact: &'static str,
    },
    #[error("oracle backend needs a ground-truth mask")]
    NoTruth,
    #[error(transparent)]
    Roi(#[from] RoiError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

impl BackendError {
    /// Short machine-readable error class.
    pub fn class(&self) -> &'static str {
        match self {
            BackendError::Unknown(_) | BackendError::MissingArtifact { .. } => "config",
            BackendError::NoTruth => "oracle",
            BackendError::Roi(_) => "roi",
            BackendError::Net(_) => "net",
            BackendError::Quant(_) => "quant",
        }
    }
}

pub type Result<T> = std::result::Result<T, BackendError>;

/// Figures reported for a loaded model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub params: usize,
    pub macs: u64,
    pub size_bytes: usize,
    pub quantized: bool,
}

impl ModelInfo {
    /// Derived from the spec alone, so every consumer reports the same values.
    pub fn for_spec(spec: &NetSpec, quantized: bool) -> Result<Self> {
        let plan = crate::net::Plan::new(spec)?;
        let store = crate::net::build(spec, 0)?;
        let size_bytes = if quantized {
            let int8 = quant::quantize_weights(&store)?;
            let sites = quant::activation_sites(spec)?
                .into_iter()
                .map(|s| {
                    (
                        s,
                        quant::ActParams {
                            scale: 1.0,
                            zero_point: 0,
                        },
                    )
                })
                .collect();
            quant::encode_int8(&int8, &QuantParams { activations: sites }).len()
        } else {
            store.to_bytes().len()
        };
        Ok(Self {
            params: plan.param_count(),
            macs: plan.macs(),
            size_bytes,
            quantized,
        })
    }
}

pub trait SegmentBackend: Send + Sync {
    fn name(&self) -> &'static str;

    fn spec(&self) -> &NetSpec;

    /// `truth` is the ground-truth crop when the caller has one.
    fn logits(&self, crop: &Tensor, truth: Option<&Tensor>) -> Result<Tensor>;

    fn info(&self) -> Result<ModelInfo> {
        ModelInfo::for_spec(self.spec(), false)
    }
}

pub struct FloatBackend {
    net: Network,
}

impl FloatBackend {
    pub fn new(spec: NetSpec, weights: WeightStore) -> Result<Self> {
        Ok(Self {
            net: Network::new(spec, weights)?,
        })
    }
}

impl SegmentBackend for FloatBackend {
    fn name(&self) -> &'static str {
        "fp32"
    }

    fn spec(&self) -> &NetSpec {
        self.net.spec()
    }

    fn logits(&self, crop: &Tensor, _truth: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.net.forward(crop)?)
    }
}

pub struct Int8Backend {
    net: QuantizedNetwork,
}

impl Int8Backend {
    pub fn new(spec: NetSpec, store: &Int8Store, params: QuantParams) -> Result<Self> {
        Ok(Self {
            net: QuantizedNetwork::new(spec, store, params)?,
        })
    }
}

impl SegmentBackend for Int8Backend {
    fn name(&self) -> &'static str {
        "int8"
    }

    fn spec(&self) -> &NetSpec {
        self.net.spec()
    }

    fn logits(&self, crop: &Tensor, _truth: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.net.forward(crop)?)
    }

    fn info(&self) -> Result<ModelInfo> {
        ModelInfo::for_spec(self.spec(), true)
    }
}

/// Returns `+1` logits on ground-truth foreground and `-1` elsewhere.
pub struct OracleBackend {
    spec: NetSpec,
}

impl OracleBackend {
    pub fn new(spec: NetSpec) -> Self {
        Self { spec }
    }
}

impl SegmentBackend for OracleBackend {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn spec(&self) -> &NetSpec {
        &self.spec
    }

    fn logits(&self, _crop: &Tensor, truth: Option<&Tensor>) -> Result<Tensor> {
        let truth = truth.ok_or(BackendError::NoTruth)?;
        Ok(truth.map(|v| if v > 0.5 { 1.0 } else { -1.0 }))
    }
}

/// Everything a backend might be built from.
#[derive(Debug, Clone)]
pub struct ModelArtifacts {
    pub spec: NetSpec,
    pub weights: Option<WeightStore>,
    pub int8: Option<(Int8Store, QuantParams)>,
}

impl ModelArtifacts {
    pub fn new(spec: NetSpec) -> Self {
        Self {
            spec,
            weights: None,
            int8: None,
        }
    }
}

pub type BackendFactory = fn(&ModelArtifacts) -> Result<Box<dyn SegmentBackend>>;

/// Name -> constructor table for segmentation backends.
#[derive(Clone)]
pub struct BackendRegistry {
    factories: BTreeMap<&'static str, BackendFactory>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("fp32", |a| {
            let w = a.weights.clone().ok_or(BackendError::MissingArtifact {
                backend: "fp32",
                artifact: "float weights",
            })?;
            Ok(Box::new(FloatBackend::new(a.spec.clone(), w)?))
        });
        r.register("int8", |a| {
            let (store, params) = a.int8.as_ref().ok_or(BackendError::MissingArtifact {
                backend: "int8",
                artifact: "an INT8 model",
            })?;
            Ok(Box::new(Int8Backend::new(
                a.spec.clone(),
                store,
                params.clone(),
            )?))
        });
        r.register("oracle", |a| {
            Ok(Box::new(OracleBackend::new(a.spec.clone())))
        });
        r
    }
}

impl BackendRegistry {
    pub fn register(&mut self, name: &'static str, factory: BackendFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn create(
        &self,
        name: &str,
        artifacts: &ModelArtifacts,
    ) -> Result<Box<dyn SegmentBackend>> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| BackendError::Unknown(name.to_string()))?;
        factory(artifacts)
    }
}

/// Outcome of one box prompt.
#[derive(Debug, Clone)]
pub struct PromptResult {
    pub rect: CropRect,
    pub mask: BinaryMask,
    pub logits: Tensor,
    pub latency_ms: f64,
}

impl PromptResult {
    /// The ROI mask placed on an empty canvas the size of the source frame.
    pub fn frame_mask(&self) -> BinaryMask {
        let (h, w) = (self.rect.height as usize, self.rect.width as usize);
        let win = self.rect.pixel_window();
        let mut out = BinaryMask::zeros(h, w);
        for r in 0..self.mask.height().min(h.saturating_sub(win.y0)) {
            for c in 0..self.mask.width().min(w.saturating_sub(win.x0)) {
                if self.mask.get(r, c) {
                    out.set(win.y0 + r, win.x0 + c, true);
                }
            }
        }
        out
    }
}

/// Square ROI, crop and resize, run the backend, paste the thresholded
/// logits back at ROI resolution. `truth` is a full-frame mask.
pub fn run_prompt(
    backend: &dyn SegmentBackend,
    image: &Tensor,
    bbox: BBox,
    truth: Option<&BinaryMask>,
) -> Result<PromptResult> {
    let start = Instant::now();
    let size = backend.spec().input_size;
    let cfg = PromptConfig {
        size,
        ..PromptConfig::default()
    };
    let (w, h) = (image.width() as f64, image.height() as f64);
    let rect = roi::make_square_roi(bbox, &cfg, (w, h))?;
    let crop = roi::crop_resize_image(image, &rect, size)?;
    let truth_crop = truth
        .map(|m| roi::crop_resize_mask(&m.to_tensor(), &rect, size))
        .transpose()?;
    let logits = backend.logits(&crop, truth_crop.as_ref())?;
    let mask = roi::postprocess_mask(&logits, &rect)?;
    Ok(PromptResult {
        rect,
        mask,
        logits,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lists_and_rejects() {
        let reg = BackendRegistry::default();
        assert_eq!(reg.names(), vec!["fp32", "int8", "oracle"]);
        let arts = ModelArtifacts::new(NetSpec::default());
        assert!(matches!(
            reg.create("gpu", &arts),
            Err(BackendError::Unknown(_))
        ));
        let err = reg.create("fp32", &arts).err().unwrap();
        assert_eq!(err.class(), "config");
        assert_eq!(reg.create("oracle", &arts).unwrap().name(), "oracle");
    }

    #[test]
    fn oracle_needs_truth() {
        let o = OracleBackend::new(NetSpec::default());
        let crop = Tensor::zeros([1, 3, 96, 96]);
        assert!(matches!(o.logits(&crop, None), Err(BackendError::NoTruth)));
        let t = Tensor::full([1, 1, 96, 96], 1.0);
        assert!(o
            .logits(&crop, Some(&t))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }
}
