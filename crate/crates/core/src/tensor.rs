//! Dense NCHW tensors and the handful of kernels the network is built from.
//!
//! `conv2d` and `conv2d_naive` share one accumulation order: for every output
//! element the taps are visited `ky -> kx -> ci`, left to right, starting from
//! `0.0`, and the bias is added last. Out-of-bounds (zero-padded) taps are
//! skipped rather than multiplied by zero. Under that contract the two paths
//! are bit-identical.

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: [usize; 4], len: usize },
    #[error("tensor extents must all be >= 1, got {0:?}")]
    ZeroExtent([usize; 4]),
    #[error("{op}: mismatch in {dim}: expected {expected}, got {actual}")]
    Mismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("conv2d: {0}")]
    InvalidConv(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Four-dimensional `f32` array in row-major NCHW order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: [usize; 4], value: f32) -> Self {
        assert!(!shape.contains(&0), "zero extent in {shape:?}");
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        let [n, c, h, w] = shape;
        let mut i = 0;
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        t.data[i] = f([b, ch, y, x]);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    /// Contiguous `H*W` plane of one channel.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Single-sample slice `n` as a `(1, C, H, W)` tensor.
    pub fn sample(&self, n: usize) -> Tensor {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(TensorError::Mismatch {
            op: "stack",
            dim: "batch",
            expected: 1,
            actual: 0,
        })?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(Tensor::len).sum());
        let mut n = 0;
        for t in items {
            for (dim, (&e, &a)) in ["channels", "height", "width"]
                .iter()
                .zip([c, h, w].iter().zip(t.shape[1..].iter()))
            {
                if e != a {
                    return Err(TensorError::Mismatch {
                        op: "stack",
                        dim,
                        expected: e,
                        actual: a,
                    });
                }
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Tensor::new([n, c, h, w], data)
    }
}

/// Square-kernel convolution parameters. The kernel is laid out as
/// `(out_ch, in_ch / groups, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(kernel: Tensor, bias: Vec<f32>) -> Self {
        Self {
            kernel,
            bias,
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape[1] * self.groups
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape[2]
    }
}

/// Resolved geometry of one convolution, shared by the float and integer
/// kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn resolve(
        input: [usize; 4],
        kernel: [usize; 4],
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Self> {
        let [n, c, h, w] = input;
        let [oc, icg, kh, kw] = kernel;
        if kh != kw {
            return Err(TensorError::InvalidConv(format!(
                "square kernels only, got {kh}x{kw}"
            )));
        }
        if stride == 0 || dilation == 0 || groups == 0 {
            return Err(TensorError::InvalidConv(
                "stride, dilation and groups must be positive".into(),
            ));
        }
        if c % groups != 0 || oc % groups != 0 {
            return Err(TensorError::InvalidConv(format!(
                "groups {groups} must divide in_ch {c} and out_ch {oc}"
            )));
        }
        if icg * groups != c {
            return Err(TensorError::Mismatch {
                op: "conv2d",
                dim: "in_channels",
                expected: icg * groups,
                actual: c,
            });
        }
        let span = dilation * (kh - 1) + 1;
        let out_extent = |size: usize, dim: &'static str| -> Result<usize> {
            let padded = size + 2 * padding;
            if padded < span {
                return Err(TensorError::Mismatch {
                    op: "conv2d",
                    dim,
                    expected: span,
                    actual: padded,
                });
            }
            Ok((padded - span) / stride + 1)
        };
        Ok(Self {
            batch: n,
            in_ch: c,
            out_ch: oc,
            in_h: h,
            in_w: w,
            out_h: out_extent(h, "height")?,
            out_w: out_extent(w, "width")?,
            k: kh,
            stride,
            padding,
            dilation,
            groups,
        })
    }

    pub fn of(input: &Tensor, params: &ConvParams) -> Result<Self> {
        let g = Self::resolve(
            input.shape,
            params.kernel.shape,
            params.stride,
            params.padding,
            params.dilation,
            params.groups,
        )?;
        if params.bias.len() != g.out_ch {
            return Err(TensorError::Mismatch {
                op: "conv2d",
                dim: "bias",
                expected: g.out_ch,
                actual: params.bias.len(),
            });
        }
        Ok(g)
    }

    pub fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_h, self.out_w]
    }

    /// Multiply-accumulates of one forward pass.
    pub fn macs(&self) -> u64 {
        (self.batch * self.out_ch * self.out_h * self.out_w * self.k * self.k * self.in_per_group())
            as u64
    }

    /// Range of output indices `o` along one axis for which the tap at
    /// kernel offset `kk` lands inside the input.
    #[inline]
    pub fn valid_outputs(&self, kk: usize, in_size: usize, out_size: usize) -> (usize, usize) {
        let off = kk * self.dilation;
        // input = o*stride + off - padding must lie in [0, in_size)
        let lo = if off >= self.padding {
            0
        } else {
            (self.padding - off).div_ceil(self.stride)
        };
        let hi = if in_size + self.padding <= off {
            0
        } else {
            ((in_size + self.padding - off - 1) / self.stride + 1).min(out_size)
        };
        (lo, hi.max(lo))
    }
}

/// Reference convolution: direct nested loops over every output element.
pub fn conv2d_naive(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let g = ConvGeometry::of(input, params)?;
    let mut out = Tensor::zeros(g.output_shape());
    let (icg, ocg) = (g.in_per_group(), g.out_per_group());
    for n in 0..g.batch {
        for oc in 0..g.out_ch {
            let group = oc / ocg;
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0f32;
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            for ci in 0..icg {
                                let iy =
                                    (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                let ix =
                                    (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= g.in_h as isize
                                    || ix >= g.in_w as isize
                                {
                                    continue;
                                }
                                let c = group * icg + ci;
                                let v = input.at(n, c, iy as usize, ix as usize);
                                let w = params.kernel.at(oc, ci, ky, kx);
                                acc += v * w;
                            }
                        }
                    }
                    let idx = out.index(n, oc, oy, ox);
                    out.data[idx] = acc + params.bias[oc];
                }
            }
        }
    }
    Ok(out)
}

/// Plane-at-a-time convolution, parallel over output channels.
///
/// Each output channel keeps an accumulator plane; taps are applied as
/// strided row sweeps in `ky -> kx -> ci` order, so every element sees the
/// same addition sequence as [`conv2d_naive`].
pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let g = ConvGeometry::of(input, params)?;
    let plane = g.out_h * g.out_w;
    let mut out = Tensor::zeros(g.output_shape());
    let (icg, ocg) = (g.in_per_group(), g.out_per_group());
    let kernel = params.kernel.data();
    let kk = g.k * g.k;

    out.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(slot, acc)| {
            let n = slot / g.out_ch;
            let oc = slot % g.out_ch;
            let group = oc / ocg;
            let wbase = oc * icg * kk;
            for ky in 0..g.k {
                let (oy0, oy1) = g.valid_outputs(ky, g.in_h, g.out_h);
                for kx in 0..g.k {
                    let (ox0, ox1) = g.valid_outputs(kx, g.in_w, g.out_w);
                    if oy0 >= oy1 || ox0 >= ox1 {
                        continue;
                    }
                    for ci in 0..icg {
                        let w = kernel[wbase + ci * kk + ky * g.k + kx];
                        let src = input.plane(n, group * icg + ci);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky * g.dilation - g.padding;
                            let row = &src[iy * g.in_w..(iy + 1) * g.in_w];
                            let dst = &mut acc[oy * g.out_w..(oy + 1) * g.out_w];
                            let ix0 = ox0 * g.stride + kx * g.dilation - g.padding;
                            if g.stride == 1 {
                                let len = ox1 - ox0;
                                for (d, &v) in dst[ox0..ox1].iter_mut().zip(&row[ix0..ix0 + len]) {
                                    *d += v * w;
                                }
                            } else {
                                for (j, d) in dst[ox0..ox1].iter_mut().enumerate() {
                                    *d += row[ix0 + j * g.stride] * w;
                                }
                            }
                        }
                    }
                }
            }
            let b = params.bias[oc];
            for v in acc.iter_mut() {
                *v += b;
            }
        });
    Ok(out)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2x(input: &Tensor) -> Tensor {
    let [n, c, h, w] = input.shape;
    let (oh, ow) = (2 * h, 2 * w);
    let mut data = Vec::with_capacity(n * c * oh * ow);
    for nc in 0..n * c {
        let src = &input.data[nc * h * w..(nc + 1) * h * w];
        for y in 0..oh {
            let row = &src[(y / 2) * w..(y / 2 + 1) * w];
            for x in 0..ow {
                data.push(row[x / 2]);
            }
        }
    }
    Tensor {
        shape: [n, c, oh, ow],
        data,
    }
}

/// Spatial mean per channel, shape `(N, C, 1, 1)`.
pub fn global_avg_pool(input: &Tensor) -> Tensor {
    let [n, c, h, w] = input.shape;
    let hw = h * w;
    let data = input
        .data
        .chunks(hw)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect();
    Tensor {
        shape: [n, c, 1, 1],
        data,
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, ca, h, w] = a.shape;
    for (dim, e, got) in [
        ("batch", n, b.shape[0]),
        ("height", h, b.shape[2]),
        ("width", w, b.shape[3]),
    ] {
        if e != got {
            return Err(TensorError::Mismatch {
                op: "concat_channels",
                dim,
                expected: e,
                actual: got,
            });
        }
    }
    let cb = b.shape[1];
    let hw = h * w;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for s in 0..n {
        data.extend_from_slice(&a.data[s * ca * hw..(s + 1) * ca * hw]);
        data.extend_from_slice(&b.data[s * cb * hw..(s + 1) * cb * hw]);
    }
    Ok(Tensor {
        shape: [n, ca + cb, h, w],
        data,
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        let dim = ["batch", "channels", "height", "width"];
        let i = (0..4).find(|&i| a.shape[i] != b.shape[i]).unwrap_or(0);
        return Err(TensorError::Mismatch {
            op: "add",
            dim: dim[i],
            expected: a.shape[i],
            actual: b.shape[i],
        });
    }
    Ok(Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(
            Tensor::new([1, 1, 2, 2], vec![0.0; 3]),
            Err(TensorError::DataLength { .. })
        ));
        assert!(matches!(
            Tensor::new([1, 0, 2, 2], vec![]),
            Err(TensorError::ZeroExtent(_))
        ));
    }

    #[test]
    fn identity_pointwise_is_identity() {
        let input = Tensor::from_fn([1, 3, 4, 5], |[_, c, y, x]| (c * 100 + y * 10 + x) as f32);
        let kernel = Tensor::from_fn([3, 3, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 });
        let p = ConvParams::new(kernel, vec![0.0; 3]);
        assert_eq!(conv2d(&input, &p).unwrap(), input);
        assert_eq!(conv2d_naive(&input, &p).unwrap(), input);
    }

    #[test]
    fn ones_kernel_interior_sums_window() {
        let c = 1.5;
        let input = Tensor::full([1, 1, 5, 5], c);
        let p = ConvParams::new(Tensor::full([1, 1, 3, 3], 1.0), vec![0.0]).padding(1);
        let out = conv2d(&input, &p).unwrap();
        assert_eq!(out.shape(), [1, 1, 5, 5]);
        for y in 1..4 {
            for x in 1..4 {
                assert_eq!(out.at(0, 0, y, x), 9.0 * c);
            }
        }
        // corner sees a 2x2 window under zero padding
        assert_eq!(out.at(0, 0, 0, 0), 4.0 * c);
    }

    #[test]
    fn naive_two_by_two_window() {
        let input = t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let p = ConvParams::new(Tensor::full([1, 1, 2, 2], 1.0), vec![0.0]);
        let out = conv2d_naive(&input, &p).unwrap();
        assert_eq!(out.shape(), [1, 1, 1, 1]);
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn output_extent_formula() {
        let input = Tensor::zeros([2, 4, 11, 9]);
        let p = ConvParams::new(Tensor::zeros([6, 2, 3, 3]), vec![0.0; 6])
            .groups(2)
            .stride(2)
            .padding(2)
            .dilation(2);
        let out = conv2d(&input, &p).unwrap();
        // (11 + 4 - 4 - 1) / 2 + 1 = 6, (9 + 4 - 4 - 1) / 2 + 1 = 5
        assert_eq!(out.shape(), [2, 6, 6, 5]);
    }

    #[test]
    fn conv_errors_name_the_dimension() {
        let input = Tensor::zeros([1, 3, 4, 4]);
        let p = ConvParams::new(Tensor::zeros([2, 4, 1, 1]), vec![0.0; 2]);
        match conv2d(&input, &p) {
            Err(TensorError::Mismatch { dim, .. }) => assert_eq!(dim, "in_channels"),
            other => panic!("unexpected {other:?}"),
        }
        let p = ConvParams::new(Tensor::zeros([1, 3, 5, 5]), vec![0.0]);
        match conv2d(&input, &p) {
            Err(TensorError::Mismatch { dim, .. }) => assert_eq!(dim, "height"),
            other => panic!("unexpected {other:?}"),
        }
        let p = ConvParams::new(Tensor::zeros([1, 3, 1, 1]), vec![0.0, 1.0]);
        assert!(conv2d(&input, &p).is_err());
    }

    #[test]
    fn upsample_block_replication() {
        let out = upsample_nearest2x(&t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(out.shape(), [1, 1, 4, 4]);
        assert_eq!(out.data(), &expected);
        assert_eq!(
            upsample_nearest2x(&t([1, 1, 1, 1], &[7.0])).data(),
            &[7.0; 4]
        );
    }

    #[test]
    fn upsample_even_indices_recover_input() {
        let input = Tensor::from_fn([2, 3, 3, 5], |[n, c, y, x]| {
            (n + 2 * c + 3 * y + 5 * x) as f32
        });
        let up = upsample_nearest2x(&input);
        let down = Tensor::from_fn(input.shape(), |[n, c, y, x]| up.at(n, c, 2 * y, 2 * x));
        assert_eq!(down, input);
    }

    #[test]
    fn pooling() {
        assert_eq!(
            global_avg_pool(&t([1, 1, 2, 2], &[0.0, 2.0, 4.0, 6.0])).data(),
            &[3.0]
        );
        assert_eq!(
            global_avg_pool(&Tensor::full([1, 2, 3, 3], 0.25)).data(),
            &[0.25, 0.25]
        );
        let a = global_avg_pool(&t([1, 1, 2, 3], &[1.0, 5.0, 2.0, 9.0, 3.0, 4.0]));
        let b = global_avg_pool(&t([1, 1, 2, 3], &[9.0, 4.0, 3.0, 1.0, 2.0, 5.0]));
        assert_eq!(a, b);
    }

    #[test]
    fn pointwise_and_shape_ops() {
        assert_eq!(relu(&t([1, 1, 1, 2], &[-1.0, 2.0])).data(), &[0.0, 2.0]);
        assert_eq!(sigmoid(&t([1, 1, 1, 1], &[0.0])).data(), &[0.5]);
        let s = sigmoid(&t([1, 1, 1, 2], &[-200.0, 200.0]));
        assert!(s.is_finite());
        let cat =
            concat_channels(&Tensor::zeros([2, 3, 4, 4]), &Tensor::zeros([2, 5, 4, 4])).unwrap();
        assert_eq!(cat.shape(), [2, 8, 4, 4]);
        assert!(
            concat_channels(&Tensor::zeros([1, 3, 4, 4]), &Tensor::zeros([1, 3, 4, 5])).is_err()
        );
        let sum = add(
            &t([1, 1, 1, 2], &[1.0, 2.0]),
            &t([1, 1, 1, 2], &[3.0, -2.0]),
        )
        .unwrap();
        assert_eq!(sum.data(), &[4.0, 0.0]);
        assert!(add(&Tensor::zeros([1, 1, 1, 2]), &Tensor::zeros([1, 2, 1, 1])).is_err());
    }

    #[test]
    fn concat_interleaves_per_sample() {
        let a = Tensor::from_fn([2, 1, 1, 2], |[n, _, _, x]| (10 * n + x) as f32);
        let b = Tensor::from_fn([2, 1, 1, 2], |[n, _, _, x]| (100 + 10 * n + x) as f32);
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(
            cat.data(),
            &[0.0, 1.0, 100.0, 101.0, 10.0, 11.0, 110.0, 111.0]
        );
    }
}
