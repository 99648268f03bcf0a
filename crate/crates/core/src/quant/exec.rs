use rayon::prelude::*;

use crate::net::{
    bias_name, eca_gate, weight_name, NetError, NetSpec, NodeOp, Plan, ECA_GATE_SITE,
};
use crate::tensor::{ConvGeometry, Tensor};

use super::{round_half_away, ActParams, Int8Store, QuantLayer, QuantParams, Result};

/// Int8 activation tensor with its affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub shape: [usize; 4],
    pub data: Vec<i8>,
    pub params: ActParams,
}

impl QTensor {
    pub fn quantize(t: &Tensor, params: ActParams) -> Self {
        Self {
            shape: t.shape(),
            data: t.data().iter().map(|&v| params.quantize(v)).collect(),
            params,
        }
    }

    pub fn dequantize(&self) -> Tensor {
        let data = self
            .data
            .iter()
            .map(|&q| self.params.dequantize(q))
            .collect();
        Tensor::new(self.shape, data).expect("codes cover the shape")
    }

    /// Re-express the same values under `params`.
    pub fn requantize(&self, params: ActParams) -> Self {
        if params == self.params {
            return self.clone();
        }
        let ratio = self.params.scale as f64 / params.scale as f64;
        let data = self
            .data
            .iter()
            .map(|&q| {
                let v = round_half_away((q as i32 - self.params.zero_point) as f64 * ratio)
                    + params.zero_point as f64;
                v.clamp(-128.0, 127.0) as i8
            })
            .collect();
        Self {
            shape: self.shape,
            data,
            params,
        }
    }

    fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }
}

/// Integer convolution: `i32` accumulation of `(q_in - zp_in) * q_w`, then
/// `acc * s_in * s_w + bias` requantized to `out`. With `relu`, codes below
/// the output zero-point are raised to it.
#[allow(clippy::too_many_arguments)]
pub fn qconv(
    input: &QTensor,
    weight: &QuantLayer,
    bias: &[f32],
    stride: usize,
    padding: usize,
    dilation: usize,
    groups: usize,
    out: ActParams,
    relu: bool,
) -> Result<QTensor> {
    let g = ConvGeometry::resolve(input.shape, weight.shape, stride, padding, dilation, groups)
        .map_err(NetError::from)?;
    if bias.len() != g.out_ch {
        return Err(NetError::ShapeMismatch {
            layer: weight.name.clone(),
            expected: vec![g.out_ch],
            actual: vec![bias.len()],
        }
        .into());
    }
    let zp = input.params.zero_point;
    // centring makes zero padding contribute nothing, as in the float path
    let centred: Vec<i32> = input.data.iter().map(|&q| q as i32 - zp).collect();
    let in_plane = input.plane_len();
    let plane = g.out_h * g.out_w;
    let (icg, ocg) = (g.in_per_group(), g.out_per_group());
    let kk = g.k * g.k;
    let per_channel = weight.channel_len();
    let mut data = vec![0i8; g.batch * g.out_ch * plane];

    data.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(slot, dst)| {
            let n = slot / g.out_ch;
            let oc = slot % g.out_ch;
            let group = oc / ocg;
            let wbase = oc * per_channel;
            let mut acc = vec![0i32; plane];
            for ky in 0..g.k {
                let (oy0, oy1) = g.valid_outputs(ky, g.in_h, g.out_h);
                for kx in 0..g.k {
                    let (ox0, ox1) = g.valid_outputs(kx, g.in_w, g.out_w);
                    if oy0 >= oy1 || ox0 >= ox1 {
                        continue;
                    }
                    for ci in 0..icg {
                        let w = weight.codes[wbase + ci * kk + ky * g.k + kx] as i32;
                        if w == 0 {
                            continue;
                        }
                        let c = group * icg + ci;
                        let src = &centred[(n * g.in_ch + c) * in_plane..][..in_plane];
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky * g.dilation - g.padding;
                            let row = &src[iy * g.in_w..(iy + 1) * g.in_w];
                            let a = &mut acc[oy * g.out_w..(oy + 1) * g.out_w];
                            let ix0 = ox0 * g.stride + kx * g.dilation - g.padding;
                            for (j, d) in a[ox0..ox1].iter_mut().enumerate() {
                                *d += row[ix0 + j * g.stride] * w;
                            }
                        }
                    }
                }
            }
            let mult = input.params.scale as f64 * weight.scales[oc] as f64 / out.scale as f64;
            let b = bias[oc] as f64 / out.scale as f64;
            let lo = if relu { out.zero_point as f64 } else { -128.0 };
            for (d, &a) in dst.iter_mut().zip(&acc) {
                let q = round_half_away(a as f64 * mult + b) + out.zero_point as f64;
                *d = q.clamp(lo, 127.0) as i8;
            }
        });
    Ok(QTensor {
        shape: g.output_shape(),
        data,
        params: out,
    })
}

fn upsample(x: &QTensor) -> QTensor {
    let [n, c, h, w] = x.shape;
    let mut data = Vec::with_capacity(4 * x.data.len());
    for p in x.data.chunks(h * w).take(n * c) {
        for y in 0..2 * h {
            let row = &p[(y / 2) * w..(y / 2 + 1) * w];
            data.extend((0..2 * w).map(|xx| row[xx / 2]));
        }
    }
    QTensor {
        shape: [n, c, 2 * h, 2 * w],
        data,
        params: x.params,
    }
}

fn concat(a: &QTensor, b: &QTensor, out: ActParams) -> QTensor {
    let a = a.requantize(out);
    let b = b.requantize(out);
    let [n, ca, h, w] = a.shape;
    let cb = b.shape[1];
    let plane = h * w;
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for i in 0..n {
        data.extend_from_slice(&a.data[i * ca * plane..(i + 1) * ca * plane]);
        data.extend_from_slice(&b.data[i * cb * plane..(i + 1) * cb * plane]);
    }
    QTensor {
        shape: [n, ca + cb, h, w],
        data,
        params: out,
    }
}

#[derive(Debug)]
struct ConvStep {
    weight: QuantLayer,
    bias: Vec<f32>,
}

/// Integer execution of a quantized network.
#[derive(Debug)]
pub struct QuantizedNetwork {
    spec: NetSpec,
    plan: Plan,
    params: QuantParams,
    convs: Vec<Option<ConvStep>>,
    eca_kernel: Vec<f32>,
}

impl QuantizedNetwork {
    pub fn new(spec: NetSpec, store: &Int8Store, params: QuantParams) -> Result<Self> {
        let expected = spec.fingerprint();
        if store.fingerprint != expected {
            return Err(NetError::FingerprintMismatch {
                expected,
                found: store.fingerprint,
            }
            .into());
        }
        let plan = Plan::new(&spec)?;
        for site in super::activation_sites(&spec)? {
            params.site(&site)?;
        }
        let mut eca_kernel = Vec::new();
        let mut convs = Vec::with_capacity(plan.nodes.len());
        for n in &plan.nodes {
            match &n.op {
                NodeOp::Conv(c) => {
                    let weight = store.require(&weight_name(&n.name))?.clone();
                    if weight.shape != c.weight_shape() {
                        return Err(NetError::ShapeMismatch {
                            layer: weight.name.clone(),
                            expected: c.weight_shape().to_vec(),
                            actual: weight.shape.to_vec(),
                        }
                        .into());
                    }
                    let bias = store.require(&bias_name(&n.name))?.dequantize().into_data();
                    convs.push(Some(ConvStep { weight, bias }));
                }
                NodeOp::Eca { .. } => {
                    eca_kernel = store
                        .require(&weight_name(&n.name))?
                        .dequantize()
                        .into_data();
                    convs.push(None);
                }
                _ => convs.push(None),
            }
        }
        Ok(Self {
            spec,
            plan,
            params,
            convs,
            eca_kernel,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    /// `(N, 3, S, S)` float image -> `(N, 1, S, S)` dequantized logits.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let s = self.spec.input_size;
        let [_, c, h, w] = input.shape();
        if (c, h, w) != (3, s, s) {
            return Err(NetError::InputShape {
                size: s,
                actual: input.shape(),
            }
            .into());
        }
        let mut values: Vec<Option<QTensor>> = vec![None; self.plan.nodes.len()];
        for (i, node) in self.plan.nodes.iter().enumerate() {
            let get = |id: usize| values[id].as_ref().expect("inputs are computed first");
            let out = match &node.op {
                NodeOp::Input => QTensor::quantize(input, self.params.site(&node.name)?),
                NodeOp::Conv(cn) => {
                    let step = &self.convs[i].as_ref().expect("conv layers cached");
                    qconv(
                        get(cn.src),
                        &step.weight,
                        &step.bias,
                        cn.stride,
                        cn.padding,
                        cn.dilation,
                        cn.groups,
                        self.params.site(&node.name)?,
                        cn.relu,
                    )?
                }
                NodeOp::Upsample { src } => upsample(get(*src)),
                NodeOp::Concat { a, b } => concat(get(*a), get(*b), self.params.site(&node.name)?),
                NodeOp::Eca { src, .. } => self.eca(get(*src), self.params.site(&node.name)?)?,
            };
            for src in node.inputs() {
                if self.plan.last_use[src] == i {
                    values[src] = None;
                }
            }
            values[i] = Some(out);
        }
        Ok(values[self.plan.output()]
            .take()
            .expect("output computed")
            .dequantize())
    }

    fn eca(&self, x: &QTensor, out: ActParams) -> Result<QTensor> {
        if self.spec.eca_bypass {
            return Ok(x.requantize(out));
        }
        let gate_site = self.params.site(ECA_GATE_SITE)?;
        let [n, c, h, w] = x.shape;
        let plane = h * w;
        let zp = x.params.zero_point;
        let mut data = Vec::with_capacity(x.data.len());
        for b in 0..n {
            let pooled: Vec<f32> = (0..c)
                .map(|ch| {
                    let p = &x.data[(b * c + ch) * plane..][..plane];
                    let sum: i64 = p.iter().map(|&q| (q as i32 - zp) as i64).sum();
                    let mean = x.params.scale as f64 * sum as f64 / plane as f64;
                    gate_site.dequantize(gate_site.quantize(mean as f32))
                })
                .collect();
            let gates = eca_gate(&pooled, &self.eca_kernel);
            for (ch, g) in gates.into_iter().enumerate() {
                let p = &x.data[(b * c + ch) * plane..][..plane];
                data.extend(p.iter().map(|&q| out.quantize(x.params.dequantize(q) * g)));
            }
        }
        Ok(QTensor {
            shape: x.shape,
            data,
            params: out,
        })
    }
}
