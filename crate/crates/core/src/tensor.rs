//! Dense row-major `f64` tensors and the handful of kernels a small
//! conv/dense network needs.
//!
//! Convolution and dense products take explicit [`ChannelSet`]s for their
//! input and output channels. Work for channels outside those sets is never
//! issued, and output channels outside `active_out` are left at exactly zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meter;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::param("shape", format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same buffer, new shape. Element count must match.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Number of elements per index of the leading axis.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Gathers rows of the leading axis into a new tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let stride = self.row_len();
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor { shape, data }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Sorted, duplicate-free list of channel indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ChannelSet(Vec<usize>);

impl ChannelSet {
    pub fn full(n: usize) -> Self {
        ChannelSet((0..n).collect())
    }

    pub fn empty() -> Self {
        ChannelSet(Vec::new())
    }

    pub fn from_indices(mut idx: Vec<usize>) -> Self {
        idx.sort_unstable();
        idx.dedup();
        ChannelSet(idx)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, c: usize) -> bool {
        self.0.binary_search(&c).is_ok()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn is_full(&self, n: usize) -> bool {
        self.0.len() == n && self.0.last().is_none_or(|&l| l + 1 == n)
    }

    fn check_bound(&self, n: usize, name: &'static str) -> Result<()> {
        match self.0.last() {
            Some(&l) if l >= n => Err(Error::param(
                name,
                format!("channel {l} out of range for {n} channels"),
            )),
            _ => Ok(()),
        }
    }

    /// Expands channel indices to flat feature indices of a `[C×spatial]` map.
    pub fn expand(&self, spatial: usize) -> ChannelSet {
        if spatial == 1 {
            return self.clone();
        }
        ChannelSet(
            self.0
                .iter()
                .flat_map(|&c| c * spatial..(c + 1) * spatial)
                .collect(),
        )
    }
}

fn dims<const N: usize>(t: &Tensor, op: &'static str) -> Result<[usize; N]> {
    t.shape.as_slice().try_into().map_err(|_| Error::Dimension {
        op,
        lhs: t.shape.clone(),
        rhs: vec![N],
    })
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = dims::<2>(a, "matmul")?;
    let [k2, n] = dims::<2>(b, "matmul")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    meter::add_macs((m * n * k) as u64);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Spatial geometry of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize, in_h: usize, in_w: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::param("stride", "must be at least 1"));
        }
        if kernel == 0 || kernel > in_h + 2 * padding || kernel > in_w + 2 * padding {
            return Err(Error::param(
                "kernel",
                format!("kernel {kernel} does not fit {in_h}x{in_w} input with padding {padding}"),
            ));
        }
        Ok(ConvGeometry {
            kernel,
            stride,
            padding,
            in_h,
            in_w,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn padded_h(&self) -> usize {
        self.in_h + 2 * self.padding
    }

    fn padded_w(&self) -> usize {
        self.in_w + 2 * self.padding
    }

    /// Copies one `H×W` plane into a zero-padded buffer.
    fn pad_plane(&self, plane: &[f64], buf: &mut [f64]) {
        let pw = self.padded_w();
        if self.padding == 0 {
            buf.copy_from_slice(plane);
            return;
        }
        buf.fill(0.0);
        for y in 0..self.in_h {
            let dst = (y + self.padding) * pw + self.padding;
            buf[dst..dst + self.in_w].copy_from_slice(&plane[y * self.in_w..(y + 1) * self.in_w]);
        }
    }
}

fn check_conv_shapes(input: &Tensor, filters: &Tensor, stride: usize, padding: usize) -> Result<(usize, usize, usize, ConvGeometry)> {
    let [b, cin, h, w] = dims::<4>(input, "conv2d")?;
    let [cout, fcin, k, k2] = dims::<4>(filters, "conv2d")?;
    if fcin != cin || k != k2 {
        return Err(Error::Dimension {
            op: "conv2d",
            lhs: input.shape.clone(),
            rhs: filters.shape.clone(),
        });
    }
    let geom = ConvGeometry::new(k, stride, padding, h, w)?;
    Ok((b, cin, cout, geom))
}

/// 2-D cross-correlation restricted to `active_in × active_out` filter slices.
///
/// Multiplies executed: `B·|active_in|·|active_out|·k²·H'·W'` (padding is
/// materialized, so border taps are real multiplies by zero).
pub fn conv2d(
    input: &Tensor,
    filters: &Tensor,
    stride: usize,
    padding: usize,
    active_in: &ChannelSet,
    active_out: &ChannelSet,
) -> Result<Tensor> {
    let (batch, cin, cout, g) = check_conv_shapes(input, filters, stride, padding)?;
    active_in.check_bound(cin, "active_in")?;
    active_out.check_bound(cout, "active_out")?;
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let (ph, pw) = (g.padded_h(), g.padded_w());
    let plane = g.in_h * g.in_w;
    let mut out = Tensor::zeros(&[batch, cout, oh, ow]);
    if active_in.is_empty() || active_out.is_empty() {
        return Ok(out);
    }
    let mut padded = vec![0.0; ph * pw];
    for b in 0..batch {
        for i in active_in.iter() {
            let src = &input.data[(b * cin + i) * plane..(b * cin + i + 1) * plane];
            g.pad_plane(src, &mut padded);
            for o in active_out.iter() {
                let dst = &mut out.data[(b * cout + o) * oh * ow..(b * cout + o + 1) * oh * ow];
                let f = &filters.data[(o * cin + i) * k * k..(o * cin + i + 1) * k * k];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = f[ky * k + kx];
                        for oy in 0..oh {
                            let row = &padded[(oy * stride + ky) * pw + kx..];
                            let drow = &mut dst[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                for (d, &x) in drow.iter_mut().zip(&row[..ow]) {
                                    *d += wv * x;
                                }
                            } else {
                                for (ox, d) in drow.iter_mut().enumerate() {
                                    *d += wv * row[ox * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    meter::add_macs((batch * active_in.len() * active_out.len() * k * k * oh * ow) as u64);
    Ok(out)
}

/// Gradient of [`conv2d`] w.r.t. its input, computed only for `active_in`
/// channels and only through `active_out` filters.
pub fn conv2d_backward_input(
    grad_out: &Tensor,
    filters: &Tensor,
    input_shape: &[usize],
    stride: usize,
    padding: usize,
    active_in: &ChannelSet,
    active_out: &ChannelSet,
) -> Result<Tensor> {
    let probe = Tensor::zeros(input_shape);
    let (batch, cin, cout, g) = check_conv_shapes(&probe, filters, stride, padding)?;
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    if grad_out.shape != [batch, cout, oh, ow] {
        return Err(Error::Dimension {
            op: "conv2d_backward_input",
            lhs: grad_out.shape.clone(),
            rhs: vec![batch, cout, oh, ow],
        });
    }
    let (ph, pw) = (g.padded_h(), g.padded_w());
    let mut grad_in = probe;
    if active_in.is_empty() || active_out.is_empty() {
        return Ok(grad_in);
    }
    let mut padded = vec![0.0; ph * pw];
    for b in 0..batch {
        for i in active_in.iter() {
            padded.fill(0.0);
            for o in active_out.iter() {
                let go = &grad_out.data[(b * cout + o) * oh * ow..(b * cout + o + 1) * oh * ow];
                let f = &filters.data[(o * cin + i) * k * k..(o * cin + i + 1) * k * k];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = f[ky * k + kx];
                        for oy in 0..oh {
                            let base = (oy * stride + ky) * pw + kx;
                            let grow = &go[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                for (p, &gv) in padded[base..base + ow].iter_mut().zip(grow) {
                                    *p += wv * gv;
                                }
                            } else {
                                for (ox, &gv) in grow.iter().enumerate() {
                                    padded[base + ox * stride] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
            let dst = &mut grad_in.data[(b * cin + i) * g.in_h * g.in_w..(b * cin + i + 1) * g.in_h * g.in_w];
            for y in 0..g.in_h {
                let src = (y + g.padding) * pw + g.padding;
                dst[y * g.in_w..(y + 1) * g.in_w].copy_from_slice(&padded[src..src + g.in_w]);
            }
        }
    }
    meter::add_macs((batch * active_in.len() * active_out.len() * k * k * oh * ow) as u64);
    Ok(grad_in)
}

/// Gradient of [`conv2d`] w.r.t. its filters. Slices outside
/// `active_out × active_in` are exactly zero.
pub fn conv2d_backward_filters(
    grad_out: &Tensor,
    input: &Tensor,
    filter_shape: &[usize],
    stride: usize,
    padding: usize,
    active_in: &ChannelSet,
    active_out: &ChannelSet,
) -> Result<Tensor> {
    let probe = Tensor::zeros(filter_shape);
    let (batch, cin, cout, g) = check_conv_shapes(input, &probe, stride, padding)?;
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    if grad_out.shape != [batch, cout, oh, ow] {
        return Err(Error::Dimension {
            op: "conv2d_backward_filters",
            lhs: grad_out.shape.clone(),
            rhs: vec![batch, cout, oh, ow],
        });
    }
    let (ph, pw) = (g.padded_h(), g.padded_w());
    let plane = g.in_h * g.in_w;
    let mut grad_f = probe;
    if active_in.is_empty() || active_out.is_empty() {
        return Ok(grad_f);
    }
    let mut padded = vec![0.0; ph * pw];
    for b in 0..batch {
        for i in active_in.iter() {
            g.pad_plane(&input.data[(b * cin + i) * plane..(b * cin + i + 1) * plane], &mut padded);
            for o in active_out.iter() {
                let go = &grad_out.data[(b * cout + o) * oh * ow..(b * cout + o + 1) * oh * ow];
                let f = &mut grad_f.data[(o * cin + i) * k * k..(o * cin + i + 1) * k * k];
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let base = (oy * stride + ky) * pw + kx;
                            let grow = &go[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                for (&x, &gv) in padded[base..base + ow].iter().zip(grow) {
                                    acc += x * gv;
                                }
                            } else {
                                for (ox, &gv) in grow.iter().enumerate() {
                                    acc += padded[base + ox * stride] * gv;
                                }
                            }
                        }
                        f[ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    meter::add_macs((batch * active_in.len() * active_out.len() * k * k * oh * ow) as u64);
    Ok(grad_f)
}

/// `x[B×in] · wᵀ` with `w` laid out `[out×in]`, restricted to active index
/// lists. Inactive output columns are zero.
pub fn linear(x: &Tensor, w: &Tensor, active_in: &ChannelSet, active_out: &ChannelSet) -> Result<Tensor> {
    let [batch, nin] = dims::<2>(x, "linear")?;
    let [nout, win] = dims::<2>(w, "linear")?;
    if nin != win {
        return Err(Error::Dimension {
            op: "linear",
            lhs: x.shape.clone(),
            rhs: w.shape.clone(),
        });
    }
    active_in.check_bound(nin, "active_in")?;
    active_out.check_bound(nout, "active_out")?;
    let mut out = Tensor::zeros(&[batch, nout]);
    let contiguous = active_in.is_full(nin);
    for b in 0..batch {
        let xr = &x.data[b * nin..(b + 1) * nin];
        for o in active_out.iter() {
            let wr = &w.data[o * nin..(o + 1) * nin];
            out.data[b * nout + o] = if contiguous {
                xr.iter().zip(wr).map(|(a, c)| a * c).sum()
            } else {
                active_in.iter().map(|i| xr[i] * wr[i]).sum()
            };
        }
    }
    meter::add_macs((batch * active_in.len() * active_out.len()) as u64);
    Ok(out)
}

pub fn linear_backward_input(
    grad_out: &Tensor,
    w: &Tensor,
    active_in: &ChannelSet,
    active_out: &ChannelSet,
) -> Result<Tensor> {
    let [batch, nout] = dims::<2>(grad_out, "linear_backward_input")?;
    let [wout, nin] = dims::<2>(w, "linear_backward_input")?;
    if wout != nout {
        return Err(Error::Dimension {
            op: "linear_backward_input",
            lhs: grad_out.shape.clone(),
            rhs: w.shape.clone(),
        });
    }
    let mut grad_in = Tensor::zeros(&[batch, nin]);
    let contiguous = active_in.is_full(nin);
    for b in 0..batch {
        let gi = &mut grad_in.data[b * nin..(b + 1) * nin];
        for o in active_out.iter() {
            let gv = grad_out.data[b * nout + o];
            let wr = &w.data[o * nin..(o + 1) * nin];
            if contiguous {
                for (d, &wv) in gi.iter_mut().zip(wr) {
                    *d += gv * wv;
                }
            } else {
                for i in active_in.iter() {
                    gi[i] += gv * wr[i];
                }
            }
        }
    }
    meter::add_macs((batch * active_in.len() * active_out.len()) as u64);
    Ok(grad_in)
}

pub fn linear_backward_weights(
    grad_out: &Tensor,
    x: &Tensor,
    active_in: &ChannelSet,
    active_out: &ChannelSet,
) -> Result<Tensor> {
    let [batch, nout] = dims::<2>(grad_out, "linear_backward_weights")?;
    let [xb, nin] = dims::<2>(x, "linear_backward_weights")?;
    if xb != batch {
        return Err(Error::Dimension {
            op: "linear_backward_weights",
            lhs: grad_out.shape.clone(),
            rhs: x.shape.clone(),
        });
    }
    let mut gw = Tensor::zeros(&[nout, nin]);
    let contiguous = active_in.is_full(nin);
    for b in 0..batch {
        let xr = &x.data[b * nin..(b + 1) * nin];
        for o in active_out.iter() {
            let gv = grad_out.data[b * nout + o];
            let row = &mut gw.data[o * nin..(o + 1) * nin];
            if contiguous {
                for (d, &xv) in row.iter_mut().zip(xr) {
                    *d += gv * xv;
                }
            } else {
                for i in active_in.iter() {
                    row[i] += gv * xr[i];
                }
            }
        }
    }
    meter::add_macs((batch * active_in.len() * active_out.len()) as u64);
    Ok(gw)
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    }
}

/// Routes `grad` through a ReLU whose input was `pre`.
pub fn relu_backward(grad: &Tensor, pre: &Tensor) -> Result<Tensor> {
    grad.same_shape(pre, "relu_backward")?;
    Ok(Tensor {
        shape: grad.shape.clone(),
        data: grad
            .data
            .iter()
            .zip(&pre.data)
            .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_shape(b, "add")?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

pub fn scale(x: &Tensor, factor: f64) -> Tensor {
    meter::add_elementwise(x.len() as u64);
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|v| v * factor).collect(),
    }
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_shape(b, "hadamard")?;
    meter::add_elementwise(a.len() as u64);
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    })
}

/// 2×2 max-pool (stride 2, floor) over the `active` channels. Returns the
/// pooled map and, per output cell, the flat input index of the winner.
pub fn maxpool2(x: &Tensor, active: &ChannelSet) -> Result<(Tensor, Vec<usize>)> {
    let [batch, c, h, w] = dims::<4>(x, "maxpool2")?;
    if h < 2 || w < 2 {
        return Err(Error::param("maxpool2", format!("input {h}x{w} smaller than the 2x2 window")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[batch, c, oh, ow]);
    let mut arg = vec![usize::MAX; batch * c * oh * ow];
    for b in 0..batch {
        for ch in active.iter() {
            let ib = (b * c + ch) * h * w;
            let ob = (b * c + ch) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = ib + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ib + (2 * oy + dy) * w + 2 * ox + dx;
                        if x.data[idx] > x.data[best] {
                            best = idx;
                        }
                    }
                    out.data[ob + oy * ow + ox] = x.data[best];
                    arg[ob + oy * ow + ox] = best;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward(grad: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(input_shape);
    for (&g, &a) in grad.data.iter().zip(argmax) {
        if a != usize::MAX {
            out.data[a] += g;
        }
    }
    out
}

/// Mean softmax cross-entropy over the batch and its exact gradient w.r.t.
/// the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [batch, classes] = dims::<2>(logits, "softmax_cross_entropy")?;
    if labels.len() != batch {
        return Err(Error::Dimension {
            op: "softmax_cross_entropy",
            lhs: logits.shape.clone(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
    }
    let mut grad = Tensor::zeros(&[batch, classes]);
    let mut loss = 0.0;
    let inv_b = 1.0 / batch as f64;
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits.data[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        let g = &mut grad.data[b * classes..(b + 1) * classes];
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - log_z).exp() * inv_b;
        }
        g[y] -= inv_b;
    }
    Ok((loss * inv_b, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Six-loop convolution with explicit bounds checks for padding.
    fn naive_conv(input: &Tensor, f: &Tensor, stride: usize, pad: usize) -> Tensor {
        let [b, cin, h, w]: [usize; 4] = input.shape().try_into().unwrap();
        let [cout, _, k, _]: [usize; 4] = f.shape().try_into().unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[b, cout, oh, ow]);
        for n in 0..b {
            for o in 0..cout {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = 0.0;
                        for i in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (x * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += input.data()[((n * cin + i) * h + iy as usize) * w + ix as usize]
                                        * f.data()[((o * cin + i) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data_mut()[((n * cout + o) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: u64) -> impl FnMut(usize) -> f64 {
        let mut state = seed;
        move |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        let col = t(&[2, 1], &[0.0, 1.0]);
        assert_eq!(matmul(&a, &col).unwrap().data(), &[2.0, 4.0]);
        let zero = Tensor::zeros(&[2, 2]);
        assert!(matmul(&zero, &a).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn conv_scalar_case() {
        let x = t(&[1, 1, 1, 1], &[2.0]);
        let f = t(&[1, 1, 1, 1], &[3.0]);
        let all = ChannelSet::full(1);
        assert_eq!(conv2d(&x, &f, 1, 0, &all, &all).unwrap().data(), &[6.0]);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let x = Tensor::from_fn(&[2, 3, 7, 6], lcg(1));
            let f = Tensor::from_fn(&[4, 3, 3, 3], lcg(2));
            let fast = conv2d(&x, &f, stride, pad, &ChannelSet::full(3), &ChannelSet::full(4)).unwrap();
            let slow = naive_conv(&x, &f, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn conv_with_empty_out_set_is_zero() {
        let x = Tensor::from_fn(&[1, 2, 4, 4], lcg(3));
        let f = Tensor::from_fn(&[3, 2, 3, 3], lcg(4));
        let y = conv2d(&x, &f, 1, 1, &ChannelSet::full(2), &ChannelSet::empty()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let f = Tensor::zeros(&[1, 1, 3, 3]);
        let all = ChannelSet::full(1);
        assert!(matches!(conv2d(&x, &f, 0, 1, &all, &all), Err(Error::Parameter { .. })));
        assert!(matches!(conv2d(&x, &f, 1, 0, &all, &all), Err(Error::Parameter { .. })));
    }

    #[test]
    fn restricted_conv_equals_dense_conv_of_masked_filters() {
        let x = Tensor::from_fn(&[2, 4, 5, 5], lcg(5));
        let f = Tensor::from_fn(&[5, 4, 3, 3], lcg(6));
        let ain = ChannelSet::from_indices(vec![0, 2, 3]);
        let aout = ChannelSet::from_indices(vec![1, 4]);
        let sparse = conv2d(&x, &f, 1, 1, &ain, &aout).unwrap();
        let mut fz = f.clone();
        for o in 0..5 {
            for i in 0..4 {
                if !(ain.contains(i) && aout.contains(o)) {
                    fz.data_mut()[(o * 4 + i) * 9..(o * 4 + i + 1) * 9].fill(0.0);
                }
            }
        }
        let dense = conv2d(&x, &fz, 1, 1, &ChannelSet::full(4), &ChannelSet::full(5)).unwrap();
        assert_eq!(sparse, dense);
    }

    #[test]
    fn conv_multiplies_scale_with_active_product() {
        let x = Tensor::from_fn(&[1, 8, 6, 6], lcg(7));
        let f = Tensor::from_fn(&[8, 8, 3, 3], lcg(8));
        let full = ChannelSet::full(8);
        let half = ChannelSet::from_indices(vec![0, 1, 4, 7]);
        let (_, dense) = meter::measure(|| conv2d(&x, &f, 1, 1, &full, &full).unwrap());
        let (_, sparse) = meter::measure(|| conv2d(&x, &f, 1, 1, &half, &half).unwrap());
        assert_eq!(dense.macs, 8 * 8 * 9 * 36);
        assert_eq!(sparse.macs * 4, dense.macs);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x = Tensor::from_fn(&[1, 2, 5, 4], lcg(9));
        let f = Tensor::from_fn(&[3, 2, 3, 3], lcg(10));
        let up = Tensor::from_fn(&[1, 3, 3, 2], lcg(11));
        let (ai, ao) = (ChannelSet::full(2), ChannelSet::full(3));
        let objective = |x: &Tensor, f: &Tensor| -> f64 {
            let y = conv2d(x, f, 2, 1, &ai, &ao).unwrap();
            y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let gx = conv2d_backward_input(&up, &f, x.shape(), 2, 1, &ai, &ao).unwrap();
        let gf = conv2d_backward_filters(&up, &x, f.shape(), 2, 1, &ai, &ao).unwrap();
        let h = 1e-6;
        for idx in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[idx] += h;
            xm.data_mut()[idx] -= h;
            let fd = (objective(&xp, &f) - objective(&xm, &f)) / (2.0 * h);
            assert!((fd - gx.data()[idx]).abs() < 1e-7, "input {idx}");
        }
        for idx in 0..f.len() {
            let (mut fp, mut fm) = (f.clone(), f.clone());
            fp.data_mut()[idx] += h;
            fm.data_mut()[idx] -= h;
            let fd = (objective(&x, &fp) - objective(&x, &fm)) / (2.0 * h);
            assert!((fd - gf.data()[idx]).abs() < 1e-7, "filter {idx}");
        }
    }

    #[test]
    fn linear_restricted_matches_masked_dense() {
        let x = Tensor::from_fn(&[3, 6], lcg(12));
        let w = Tensor::from_fn(&[4, 6], lcg(13));
        let ai = ChannelSet::from_indices(vec![1, 2, 5]);
        let ao = ChannelSet::from_indices(vec![0, 3]);
        let y = linear(&x, &w, &ai, &ao).unwrap();
        for b in 0..3 {
            for o in 0..4 {
                let expect: f64 = if ao.contains(o) {
                    ai.iter().map(|i| x.data()[b * 6 + i] * w.data()[o * 6 + i]).sum()
                } else {
                    0.0
                };
                assert_eq!(y.data()[b * 4 + o], expect);
            }
        }
    }

    #[test]
    fn elementwise_basics() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(hadamard(&x, &Tensor::filled(&[3], 1.0)).unwrap(), x);
        assert!(scale(&x, 0.0).data().iter().all(|&v| v == 0.0));
        assert_eq!(add(&x, &x).unwrap().data(), &[-2.0, 0.0, 4.0]);
        assert_eq!(relu_backward(&Tensor::filled(&[3], 5.0), &x).unwrap().data(), &[0.0, 0.0, 5.0]);
        assert!(matches!(add(&x, &Tensor::zeros(&[2])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let x = t(&[1, 1, 2, 2], &[1.0, 4.0, 3.0, 2.0]);
        let (y, arg) = maxpool2(&x, &ChannelSet::full(1)).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool2_backward(&t(&[1, 1, 1, 1], &[7.0]), &arg, x.shape());
        assert_eq!(g.data(), &[0.0, 7.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::zeros(&[3, 5]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 2, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_dominant_margin_goes_to_zero() {
        let logits = t(&[1, 3], &[60.0, 0.0, 0.0]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-25);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = Tensor::from_fn(&[4, 3], lcg(14));
        let labels = [0, 2, 1, 2];
        let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-5;
        for idx in 0..logits.len() {
            let (mut p, mut m) = (logits.clone(), logits.clone());
            p.data_mut()[idx] += h;
            m.data_mut()[idx] -= h;
            let fd = (softmax_cross_entropy(&p, &labels).unwrap().0 - softmax_cross_entropy(&m, &labels).unwrap().0)
                / (2.0 * h);
            let a = g.data()[idx];
            assert!((fd - a).abs() <= 1e-5 * a.abs().max(1e-3), "{fd} vs {a}");
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        assert!(matches!(
            softmax_cross_entropy(&Tensor::zeros(&[1, 3]), &[3]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn tensor_new_checks_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }
}
