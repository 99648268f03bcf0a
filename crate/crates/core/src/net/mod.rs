//! The segmentation network: layout, parameters, float execution and the
//! PSW1 weight format.

mod kernel;
mod plan;
mod spec;
mod weights;

use thiserror::Error;

use crate::binio::FormatError;
use crate::tensor::{self, ConvParams, Tensor, TensorError};

pub use kernel::{ConvKernel, DirectConv, KernelRegistry, NaiveConv};
pub use plan::{bias_name, count_macs, weight_name, ConvNode, Node, NodeId, NodeOp, Plan};
pub use spec::{DownsampleStyle, NetSpec};
pub use weights::{
    build, load_weights, load_weights_for, save_weights, WeightStore, PSW1_MAGIC, PSW1_VERSION,
};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("missing layer {0}")]
    MissingLayer(String),
    #[error("unexpected layer {0}")]
    UnexpectedLayer(String),
    #[error("duplicate layer {0}")]
    DuplicateLayer(String),
    #[error("layer {layer}: expected shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("weights were built for spec {found:#018x}, expected {expected:#018x}")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("input shape {actual:?} does not match (N, 3, {size}, {size})")]
    InputShape { size: usize, actual: [usize; 4] },
    #[error("unknown conv kernel {0:?}")]
    UnknownKernel(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Channel gate for an ECA kernel over pooled channel means (zero padded).
pub fn eca_gate(pooled: &[f32], kernel: &[f32]) -> Vec<f32> {
    let c = pooled.len() as isize;
    let half = (kernel.len() / 2) as isize;
    (0..c)
        .map(|ch| {
            let mut acc = 0.0f32;
            for (j, &w) in kernel.iter().enumerate() {
                let src = ch + j as isize - half;
                if (0..c).contains(&src) {
                    acc += w * pooled[src as usize];
                }
            }
            tensor::sigmoid_scalar(acc)
        })
        .collect()
}

/// Efficient channel attention: scale each channel by a sigmoid gate computed
/// from a 1-D convolution over the globally pooled channel vector.
pub fn eca_block(features: &Tensor, kernel: &[f32]) -> Result<Tensor> {
    if kernel.len().is_multiple_of(2) {
        return Err(NetError::InvalidSpec(format!(
            "ECA kernel length {} must be odd",
            kernel.len()
        )));
    }
    let pooled = tensor::global_avg_pool(features);
    Ok(apply_eca(features, &pooled, kernel))
}

fn apply_eca(features: &Tensor, pooled: &Tensor, kernel: &[f32]) -> Tensor {
    let [n, c, h, w] = features.shape();
    let mut out = features.clone();
    for b in 0..n {
        let gates = eca_gate(&pooled.data()[b * c..(b + 1) * c], kernel);
        for (ch, g) in gates.into_iter().enumerate() {
            let start = (b * c + ch) * h * w;
            for v in &mut out.data_mut()[start..start + h * w] {
                *v *= g;
            }
        }
    }
    out
}

/// Float network bound to an immutable weight store.
pub struct Network {
    spec: NetSpec,
    plan: Plan,
    store: WeightStore,
    convs: Vec<Option<ConvParams>>,
    eca_kernel: Vec<f32>,
    kernel: Box<dyn ConvKernel>,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("spec", &self.spec)
            .field("params", &self.store.param_count())
            .field("kernel", &self.kernel.name())
            .finish()
    }
}

/// Name under which the pooled ECA input is reported to observers.
pub const ECA_GATE_SITE: &str = "eca.gate";

impl Network {
    pub fn new(spec: NetSpec, store: WeightStore) -> Result<Self> {
        Self::with_kernel(spec, store, Box::new(DirectConv))
    }

    pub fn with_kernel(
        spec: NetSpec,
        store: WeightStore,
        kernel: Box<dyn ConvKernel>,
    ) -> Result<Self> {
        store.validate(&spec)?;
        let plan = Plan::new(&spec)?;
        let mut eca_kernel = Vec::new();
        let convs = plan
            .nodes
            .iter()
            .map(|n| match &n.op {
                NodeOp::Conv(c) => {
                    let w = store.require(&weight_name(&n.name))?.clone();
                    let b = store.require(&bias_name(&n.name))?.data().to_vec();
                    Ok(Some(
                        ConvParams::new(w, b)
                            .stride(c.stride)
                            .padding(c.padding)
                            .dilation(c.dilation)
                            .groups(c.groups),
                    ))
                }
                NodeOp::Eca { .. } => {
                    eca_kernel = store.require(&weight_name(&n.name))?.data().to_vec();
                    Ok(None)
                }
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            plan,
            store,
            convs,
            eca_kernel,
            kernel,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn weights(&self) -> &WeightStore {
        &self.store
    }

    pub fn into_weights(self) -> WeightStore {
        self.store
    }

    pub fn conv_params(&self, node: NodeId) -> Option<&ConvParams> {
        self.convs[node].as_ref()
    }

    pub fn check_input(&self, input: &Tensor) -> Result<()> {
        let s = self.spec.input_size;
        let [_, c, h, w] = input.shape();
        if (c, h, w) != (3, s, s) {
            return Err(NetError::InputShape {
                size: s,
                actual: input.shape(),
            });
        }
        Ok(())
    }

    /// `(N, 3, S, S)` image -> `(N, 1, S, S)` logits.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.run(input, self.plan.output(), &mut |_, _| {})
    }

    /// Forward pass that reports every node output (and the pooled ECA input
    /// as [`ECA_GATE_SITE`]) to `observer`.
    pub fn forward_observed(
        &self,
        input: &Tensor,
        observer: &mut dyn FnMut(&str, &Tensor),
    ) -> Result<Tensor> {
        self.run(input, self.plan.output(), observer)
    }

    /// Feature map entering the output head.
    pub fn head_features(&self, input: &Tensor) -> Result<Tensor> {
        let head = self.plan.output();
        let src = match &self.plan.nodes[head].op {
            NodeOp::Conv(c) => c.src,
            _ => unreachable!("the plan always ends in a conv head"),
        };
        self.run(input, src, &mut |_, _| {})
    }

    fn run(
        &self,
        input: &Tensor,
        until: NodeId,
        observer: &mut dyn FnMut(&str, &Tensor),
    ) -> Result<Tensor> {
        self.check_input(input)?;
        let mut values: Vec<Option<Tensor>> = vec![None; until + 1];
        for (i, node) in self.plan.nodes[..=until].iter().enumerate() {
            let get = |id: NodeId| values[id].as_ref().expect("inputs are computed first");
            let out = match &node.op {
                NodeOp::Input => input.clone(),
                NodeOp::Conv(c) => {
                    let params = self.convs[i].as_ref().expect("conv params cached");
                    let y = self.kernel.conv(get(c.src), params)?;
                    if c.relu {
                        tensor::relu(&y)
                    } else {
                        y
                    }
                }
                NodeOp::Upsample { src } => tensor::upsample_nearest2x(get(*src)),
                NodeOp::Concat { a, b } => tensor::concat_channels(get(*a), get(*b))?,
                NodeOp::Eca { src, .. } => {
                    let x = get(*src);
                    let pooled = tensor::global_avg_pool(x);
                    observer(ECA_GATE_SITE, &pooled);
                    if self.spec.eca_bypass {
                        x.clone()
                    } else {
                        apply_eca(x, &pooled, &self.eca_kernel)
                    }
                }
            };
            observer(&node.name, &out);
            for src in node.inputs() {
                if self.plan.last_use[src] == i && src != until {
                    values[src] = None;
                }
            }
            values[i] = Some(out);
        }
        Ok(values[until].take().expect("target node computed"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eca_zero_kernel_halves() {
        let x = Tensor::from_fn([1, 5, 3, 3], |[_, c, y, x]| (c + y * 3 + x) as f32);
        let out = eca_block(&x, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(out, x.map(|v| v * 0.5));
    }

    #[test]
    fn eca_identical_neighbourhoods_share_gates() {
        let x = Tensor::full([1, 6, 4, 4], 0.7);
        let out = eca_block(&x, &[0.3, -0.2, 0.5]).unwrap();
        // interior channels 1..5 see identical pooled neighbourhoods
        let g: Vec<f32> = (1..5).map(|c| out.at(0, c, 0, 0)).collect();
        assert!(g.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(out.shape(), x.shape());
        assert!(eca_block(&x, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn eca_gate_matches_hand_computation() {
        let pooled = [1.0, 2.0, 3.0];
        let g = eca_gate(&pooled, &[0.5, 1.0, -1.0]);
        let expect = [
            tensor::sigmoid_scalar(1.0 * 1.0 - 2.0),
            tensor::sigmoid_scalar(0.5 * 1.0 + 2.0 - 3.0),
            tensor::sigmoid_scalar(0.5 * 2.0 + 3.0),
        ];
        assert_eq!(g, expect);
    }
}
