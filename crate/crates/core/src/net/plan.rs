//! The network as a flat, topologically ordered list of nodes. Float and
//! integer execution, calibration and MAC counting all walk the same plan.

use crate::tensor::ConvGeometry;

use super::{NetError, NetSpec};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvNode {
    pub src: NodeId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub relu: bool,
}

impl ConvNode {
    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_ch,
            self.in_ch / self.groups,
            self.kernel,
            self.kernel,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeOp {
    Input,
    Conv(ConvNode),
    Upsample { src: NodeId },
    Concat { a: NodeId, b: NodeId },
    Eca { src: NodeId, kernel: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    /// Layer / activation-site name.
    pub name: String,
    pub op: NodeOp,
    /// `(C, H, W)` of the node output.
    pub shape: [usize; 3],
}

impl Node {
    pub fn inputs(&self) -> Vec<NodeId> {
        match self.op {
            NodeOp::Input => vec![],
            NodeOp::Conv(ref c) => vec![c.src],
            NodeOp::Upsample { src } | NodeOp::Eca { src, .. } => vec![src],
            NodeOp::Concat { a, b } => vec![a, b],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub nodes: Vec<Node>,
    /// Index of the last consumer of each node's output.
    pub last_use: Vec<NodeId>,
}

pub fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

pub fn bias_name(layer: &str) -> String {
    format!("{layer}.bias")
}

struct Builder {
    nodes: Vec<Node>,
}

impl Builder {
    fn push(&mut self, name: String, op: NodeOp, shape: [usize; 3]) -> NodeId {
        self.nodes.push(Node { name, op, shape });
        self.nodes.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: String,
        src: NodeId,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
        relu: bool,
    ) -> Result<NodeId, NetError> {
        let [in_ch, h, w] = self.nodes[src].shape;
        let padding = dilation * (kernel - 1) / 2;
        let g = ConvGeometry::resolve(
            [1, in_ch, h, w],
            [out_ch, in_ch / groups, kernel, kernel],
            stride,
            padding,
            dilation,
            groups,
        )?;
        let node = ConvNode {
            src,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            dilation,
            groups,
            relu,
        };
        Ok(self.push(name, NodeOp::Conv(node), [out_ch, g.out_h, g.out_w]))
    }

    /// Depthwise 3x3 + ReLU, then pointwise 1x1 + ReLU.
    fn separable(
        &mut self,
        name: &str,
        src: NodeId,
        out_ch: usize,
        dilation: usize,
    ) -> Result<NodeId, NetError> {
        let in_ch = self.nodes[src].shape[0];
        let dw = self.conv(
            format!("{name}.dw"),
            src,
            in_ch,
            3,
            1,
            dilation,
            in_ch,
            true,
        )?;
        self.conv(format!("{name}.pw"), dw, out_ch, 1, 1, 1, 1, true)
    }
}

impl Plan {
    pub fn new(spec: &NetSpec) -> Result<Self, NetError> {
        spec.validate()?;
        let s = spec.input_size;
        let mut b = Builder { nodes: Vec::new() };
        let mut x = b.push("input".into(), NodeOp::Input, [3, s, s]);

        let mut skips = Vec::with_capacity(spec.stages());
        for (i, (&ch, &blocks)) in spec
            .encoder_channels
            .iter()
            .zip(&spec.encoder_blocks)
            .enumerate()
        {
            x = b.conv(format!("enc{i}.down"), x, ch, 3, 2, 1, 1, true)?;
            for j in 0..blocks {
                x = b.separable(&format!("enc{i}.block{j}"), x, ch, 1)?;
            }
            skips.push(x);
        }

        for j in 0..spec.bottleneck_blocks {
            let dilation = if j + 1 == spec.bottleneck_blocks {
                spec.bottleneck_dilation
            } else {
                1
            };
            x = b.separable(
                &format!("bottleneck.block{j}"),
                x,
                spec.bottleneck_channels,
                dilation,
            )?;
        }

        let stages = spec.stages();
        for (i, (&ch, &blocks)) in spec
            .decoder_channels
            .iter()
            .zip(&spec.decoder_blocks)
            .enumerate()
        {
            let [c, h, w] = b.nodes[x].shape;
            x = b.push(
                format!("dec{i}.up"),
                NodeOp::Upsample { src: x },
                [c, 2 * h, 2 * w],
            );
            if let Some(skip_stage) = stages.checked_sub(2 + i) {
                let skip = skips[skip_stage];
                let [sc, sh, sw] = b.nodes[skip].shape;
                if (sh, sw) != (2 * h, 2 * w) {
                    return Err(NetError::InvalidSpec(format!(
                        "skip from enc{skip_stage} is {sh}x{sw}, decoder stage {i} is {}x{}",
                        2 * h,
                        2 * w
                    )));
                }
                x = b.push(
                    format!("dec{i}.cat"),
                    NodeOp::Concat { a: x, b: skip },
                    [c + sc, sh, sw],
                );
            }
            for j in 0..blocks {
                x = b.separable(&format!("dec{i}.block{j}"), x, ch, 1)?;
            }
        }

        let shape = b.nodes[x].shape;
        x = b.push(
            "eca".into(),
            NodeOp::Eca {
                src: x,
                kernel: spec.eca_kernel,
            },
            shape,
        );
        x = b.conv("refine.dw".into(), x, shape[0], 3, 1, 1, shape[0], true)?;
        b.conv("head".into(), x, 1, 1, 1, 1, 1, false)?;

        let nodes = b.nodes;
        let mut last_use: Vec<NodeId> = (0..nodes.len()).collect();
        for (i, n) in nodes.iter().enumerate() {
            for src in n.inputs() {
                last_use[src] = i;
            }
        }
        Ok(Self { nodes, last_use })
    }

    pub fn output(&self) -> NodeId {
        self.nodes.len() - 1
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    /// Every trainable tensor in build order: `(name, shape)`.
    pub fn parameters(&self) -> Vec<(String, [usize; 4])> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.op {
                NodeOp::Conv(c) => {
                    out.push((weight_name(&n.name), c.weight_shape()));
                    out.push((bias_name(&n.name), [c.out_ch, 1, 1, 1]));
                }
                NodeOp::Eca { kernel, .. } => {
                    out.push((weight_name(&n.name), [1, 1, 1, *kernel]));
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Multiply-accumulates for one single-image forward pass. Convolutions
    /// count `out_elems * k * k * in_ch / groups`; ECA counts its channel
    /// convolution plus the per-element gating.
    pub fn macs(&self) -> u64 {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                NodeOp::Conv(c) => {
                    let [oc, oh, ow] = n.shape;
                    (oc * oh * ow * c.kernel * c.kernel * (c.in_ch / c.groups)) as u64
                }
                NodeOp::Eca { kernel, .. } => {
                    let [c, h, w] = n.shape;
                    (c * kernel + c * h * w) as u64
                }
                _ => 0,
            })
            .sum()
    }
}

pub fn count_macs(spec: &NetSpec) -> Result<u64, NetError> {
    Ok(Plan::new(spec)?.macs())
}
