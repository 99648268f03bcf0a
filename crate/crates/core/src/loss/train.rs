//! Head-only fine-tuning. The output head is a 1x1 convolution, so its
//! gradient is a contraction of the logit gradient with the frozen feature
//! map and no backward pass through the rest of the network is needed.

use log::debug;

use crate::net::{bias_name, weight_name, NetSpec, Network, WeightStore};
use crate::roi::{crop_resize_image, crop_resize_mask, RoiError};
use crate::synth::SynthSample;
use crate::tensor::Tensor;

use super::{loss_grad, total_loss, LossConfig, LossError, Result, TeacherRecord};

/// One prompt crop with its teacher prediction and ground truth.
#[derive(Debug, Clone)]
pub struct TrainSample {
    /// `(1, 3, S, S)` crop.
    pub image: Tensor,
    pub teacher: TeacherRecord,
    /// `(1, 1, S, S)` binary mask.
    pub gt: Tensor,
}

impl TrainSample {
    pub fn from_synth(sample: &SynthSample, size: usize) -> std::result::Result<Self, RoiError> {
        let image = crop_resize_image(&sample.image, &sample.rect, size)?;
        let gt = crop_resize_mask(&sample.mask.to_tensor(), &sample.rect, size)?;
        Ok(Self {
            image,
            teacher: TeacherRecord {
                annotation_id: sample.annotation_id,
                logits: sample.teacher_logits.clone(),
                confidence: sample.confidence,
            },
            gt,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub loss: LossConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
            loss: LossConfig::default(),
        }
    }
}

/// AdamW with decoupled weight decay over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(len: usize, cfg: &FitConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            eps: cfg.eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// `decay` marks which entries receive weight decay.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], decay: &[bool]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            if decay[i] {
                params[i] -= self.lr * self.weight_decay * params[i];
            }
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub weights: WeightStore,
    /// Total loss before each step.
    pub trace: Vec<f64>,
}

impl FitOutcome {
    /// Mean of the last `window` losses over the mean of the first `window`.
    pub fn smoothed_ratio(&self, window: usize) -> Option<f64> {
        let w = window.min(self.trace.len());
        if w == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some(mean(&self.trace[self.trace.len() - w..]) / mean(&self.trace[..w]))
    }
}

fn head_logits(features: &Tensor, w: &[f64], b: f64) -> Tensor {
    let [n, c, h, wd] = features.shape();
    let plane = h * wd;
    let mut out = vec![0.0f32; n * plane];
    for img in 0..n {
        let dst = &mut out[img * plane..(img + 1) * plane];
        let mut acc = vec![0.0f64; plane];
        for (ci, &wc) in w.iter().enumerate().take(c) {
            for (a, &f) in acc.iter_mut().zip(features.plane(img, ci)) {
                *a += wc * f as f64;
            }
        }
        for (d, a) in dst.iter_mut().zip(&acc) {
            *d = (a + b) as f32;
        }
    }
    Tensor::new([n, 1, h, wd], out).expect("head output shape")
}

/// Fine-tune the output head on `dataset`, full batch, with AdamW.
pub fn fit_head(
    spec: &NetSpec,
    weights: WeightStore,
    dataset: &[TrainSample],
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    if dataset.is_empty() {
        return Err(LossError::EmptyDataset);
    }
    cfg.loss.validate()?;
    let net = Network::new(spec.clone(), weights)?;
    let features = dataset
        .iter()
        .map(|s| net.head_features(&s.image))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let features = Tensor::stack(&features).map_err(crate::net::NetError::from)?;
    let mut store = net.into_weights();

    let teacher = Tensor::stack(
        &dataset
            .iter()
            .map(|s| s.teacher.logits.clone())
            .collect::<Vec<_>>(),
    )
    .map_err(crate::net::NetError::from)?;
    let gt = Tensor::stack(&dataset.iter().map(|s| s.gt.clone()).collect::<Vec<_>>())
        .map_err(crate::net::NetError::from)?;
    let confidence: Vec<f32> = dataset.iter().map(|s| s.teacher.confidence).collect();

    let (wn, bn) = (weight_name("head"), bias_name("head"));
    let head_w = store.require(&wn)?.clone();
    let head_b = store.require(&bn)?.clone();
    let c = head_w.len();
    let mut params: Vec<f64> = head_w
        .data()
        .iter()
        .chain(head_b.data())
        .map(|&v| v as f64)
        .collect();
    let decay: Vec<bool> = (0..params.len()).map(|i| i < c).collect();
    let mut opt = AdamW::new(params.len(), cfg);
    let mut trace = Vec::with_capacity(cfg.steps);

    let [n, _, h, w] = features.shape();
    let plane = h * w;
    for step in 0..cfg.steps {
        let logits = head_logits(&features, &params[..c], params[c]);
        let breakdown = total_loss(&logits, &teacher, &gt, &confidence, &cfg.loss)?;
        if !breakdown.l_total.is_finite() {
            return Err(LossError::NonFinite { step, breakdown });
        }
        trace.push(breakdown.l_total);
        debug!("fit_head step {step}: {:.6}", breakdown.l_total);

        let dz = loss_grad(&logits, &teacher, &gt, &confidence, &cfg.loss)?;
        let mut grads = vec![0.0f64; params.len()];
        for img in 0..n {
            let g = &dz.data()[img * plane..(img + 1) * plane];
            for (ci, gw) in grads[..c].iter_mut().enumerate() {
                *gw += g
                    .iter()
                    .zip(features.plane(img, ci))
                    .map(|(&a, &f)| a as f64 * f as f64)
                    .sum::<f64>();
            }
            grads[c] += g.iter().map(|&a| a as f64).sum::<f64>();
        }
        opt.step(&mut params, &grads, &decay);
    }

    let new_w = Tensor::new(
        head_w.shape(),
        params[..c].iter().map(|&v| v as f32).collect(),
    )
    .expect("head weight shape");
    let new_b = Tensor::new(head_b.shape(), vec![params[c] as f32]).expect("head bias shape");
    // lr = 0 leaves f32 values exactly as loaded
    if cfg.lr != 0.0 {
        store.replace(&wn, new_w)?;
        store.replace(&bn, new_b)?;
    }
    Ok(FitOutcome {
        weights: store,
        trace,
    })
}
