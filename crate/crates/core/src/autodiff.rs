//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every executed operation together with the
//! activations its backward pass needs. Nodes are appended in execution
//! order, so walking the record backwards is a valid reverse topological
//! traversal and each node is visited exactly once.
//!
//! Reductions accumulate sequentially in ascending index order. Matrix
//! products use a blocked kernel whose order is fixed for a given shape, so
//! a forward or backward pass is bit-reproducible for identical inputs.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, broadcast_source_indices, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Default for ConvOptions {
    fn default() -> Self {
        ConvOptions {
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    dilation: usize,
    ho: usize,
    wo: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], opts: ConvOptions) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {input:?} and kernel {kernel:?} must be rank 4"),
            ));
        }
        if opts.stride == 0 || opts.dilation == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d stride {} and dilation {} must be positive",
                opts.stride, opts.dilation
            )));
        }
        let (n, h, w, cin) = (input[0], input[1], input[2], input[3]);
        let (kh, kw, kcin, cout) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        let ekh = (kh - 1) * opts.dilation + 1;
        let ekw = (kw - 1) * opts.dilation + 1;
        let (ho, wo, pad_top, pad_left) = match opts.padding {
            Padding::Same => {
                let ho = h.div_ceil(opts.stride);
                let wo = w.div_ceil(opts.stride);
                let pad_h = ((ho - 1) * opts.stride + ekh).saturating_sub(h);
                let pad_w = ((wo - 1) * opts.stride + ekw).saturating_sub(w);
                (ho, wo, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if h < ekh || w < ekw {
                    return Err(Error::shape(
                        "conv2d",
                        format!("valid padding needs input {h}x{w} >= footprint {ekh}x{ekw}"),
                    ));
                }
                (
                    (h - ekh) / opts.stride + 1,
                    (w - ekw) / opts.stride + 1,
                    0,
                    0,
                )
            }
        };
        Ok(ConvGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride: opts.stride,
            dilation: opts.dilation,
            ho,
            wo,
            pad_top,
            pad_left,
        })
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Pointwise convolution that reads the input buffer directly.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let patch = self.patch();
        let mut cols = vec![T::zero(); self.rows() * patch];
        for b in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = ((b * self.ho + oy) * self.wo + ox) * patch;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky * self.dilation) as isize
                            - self.pad_top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx * self.dilation) as isize
                                - self.pad_left as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src =
                                ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            let dst = row + (ky * self.kw + kx) * self.cin;
                            cols[dst..dst + self.cin].copy_from_slice(&x[src..src + self.cin]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T]) -> Vec<T> {
        let patch = self.patch();
        let mut x = vec![T::zero(); self.n * self.h * self.w * self.cin];
        for b in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = ((b * self.ho + oy) * self.wo + ox) * patch;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky * self.dilation) as isize
                            - self.pad_top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx * self.dilation) as isize
                                - self.pad_left as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let dst =
                                ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            let src = row + (ky * self.kw + kx) * self.cin;
                            for c in 0..self.cin {
                                x[dst + c] += cols[src + c];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// Sparse linear map from input positions to output positions, applied
/// identically to every channel. Each output position reads a weighted sum
/// of input positions (compressed-row layout).
#[derive(Clone, Debug)]
pub struct GatherPlan<T> {
    /// Number of output positions.
    pub outputs: usize,
    /// `offsets[o]..offsets[o + 1]` indexes the taps of output `o`.
    pub offsets: Vec<usize>,
    pub sources: Vec<usize>,
    pub weights: Vec<T>,
}

impl<T: Real> GatherPlan<T> {
    pub fn new() -> Self {
        GatherPlan {
            outputs: 0,
            offsets: vec![0],
            sources: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Appends one output position from its `(source, weight)` taps.
    pub fn push_output(&mut self, taps: impl IntoIterator<Item = (usize, T)>) {
        for (s, w) in taps {
            self.sources.push(s);
            self.weights.push(w);
        }
        self.offsets.push(self.sources.len());
        self.outputs += 1;
    }

    pub fn max_source(&self) -> Option<usize> {
        self.sources.iter().copied().max()
    }

    /// Applies the plan to a `(positions, channels)` buffer.
    pub fn apply(&self, input: &[T], channels: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.outputs * channels];
        for o in 0..self.outputs {
            let dst = &mut out[o * channels..(o + 1) * channels];
            for t in self.offsets[o]..self.offsets[o + 1] {
                let w = self.weights[t];
                let src = &input[self.sources[t] * channels..(self.sources[t] + 1) * channels];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    fn apply_transpose(&self, grad: &[T], channels: usize, positions: usize) -> Vec<T> {
        let mut out = vec![T::zero(); positions * channels];
        for o in 0..self.outputs {
            let g = &grad[o * channels..(o + 1) * channels];
            for t in self.offsets[o]..self.offsets[o + 1] {
                let w = self.weights[t];
                let s = self.sources[t];
                let dst = &mut out[s * channels..(s + 1) * channels];
                for (d, &gv) in dst.iter_mut().zip(g) {
                    *d += w * gv;
                }
            }
        }
        out
    }
}

impl<T: Real> Default for GatherPlan<T> {
    fn default() -> Self {
        Self::new()
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Down2(Var),
    Up2(Var),
    Gather {
        input: Var,
        plan: GatherPlan<T>,
    },
    Concat(Vec<Var>),
    BroadcastTo(Var),
    Reshape(Var),
    SigmoidBce {
        logits: Var,
        /// d(loss)/d(logit) already scaled, saved from the forward pass.
        dlogits: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Statistics of a training-mode batch normalization call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Operation record plus gradient storage.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn reduce_to<T: Real>(grad: &[T], out_shape: &[usize], src_shape: &[usize]) -> Vec<T> {
    if out_shape == src_shape {
        return grad.to_vec();
    }
    let n: usize = src_shape.iter().product();
    let mut res = vec![T::zero(); n];
    // Common case: source shape is a trailing suffix of the output shape.
    if src_shape.len() <= out_shape.len()
        && out_shape[out_shape.len() - src_shape.len()..] == *src_shape
    {
        for (i, &g) in grad.iter().enumerate() {
            res[i % n] += g;
        }
        return res;
    }
    for (i, s) in broadcast_source_indices(src_shape, out_shape)
        .into_iter()
        .enumerate()
    {
        res[s] += grad[i];
    }
    res
}

fn expand<T: Real>(src: &[T], src_shape: &[usize], out_shape: &[usize]) -> Vec<T> {
    if src_shape == out_shape {
        return src.to_vec();
    }
    let n = src.len();
    let total: usize = out_shape.iter().product();
    if src_shape.len() <= out_shape.len()
        && out_shape[out_shape.len() - src_shape.len()..] == *src_shape
    {
        return (0..total).map(|i| src[i % n]).collect();
    }
    broadcast_source_indices(src_shape, out_shape)
        .into_iter()
        .map(|s| src[s])
        .collect()
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new_allow_empty(self.nodes[v.0].value.shape(), g.clone()).ok()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        broadcast_shape(self.shape(a), self.shape(b)).ok_or_else(|| {
            Error::shape(
                op,
                format!(
                    "{:?} and {:?} do not broadcast",
                    self.shape(a),
                    self.shape(b)
                ),
            )
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("add", a, b)?;
        let av = expand(self.value(a).data(), self.shape(a), &shape);
        let bv = expand(self.value(b).data(), self.shape(b), &shape);
        let data = av.iter().zip(&bv).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new_allow_empty(&shape, data)?,
            Op::Add(a, b),
            rg,
            "add",
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("mul", a, b)?;
        let av = expand(self.value(a).data(), self.shape(a), &shape);
        let bv = expand(self.value(b).data(), self.shape(b), &shape);
        let data = av.iter().zip(&bv).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new_allow_empty(&shape, data)?,
            Op::Mul(a, b),
            rg,
            "mul",
        )
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg, "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg, "sigmoid")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut s = T::zero();
        for &x in self.value(a).data() {
            s += x;
        }
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let mut s = T::zero();
        for &x in self.value(a).data() {
            s += x;
        }
        let rg = self.rg(a);
        self.push(Tensor::scalar(s / T::of(n as f64)), Op::Mean(a), rg, "mean")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// Cross-correlation of an NHWC input with a `(kh, kw, cin, cout)` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, opts: ConvOptions) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), opts)?;
        let mut out = vec![T::zero(); geom.rows() * geom.cout];
        let cols = if geom.is_pointwise() {
            T::gemm(
                geom.rows(),
                geom.patch(),
                geom.cout,
                self.value(input).data(),
                false,
                self.value(kernel).data(),
                false,
                T::zero(),
                &mut out,
            );
            Vec::new()
        } else {
            let cols = geom.im2col(self.value(input).data());
            T::gemm(
                geom.rows(),
                geom.patch(),
                geom.cout,
                &cols,
                false,
                self.value(kernel).data(),
                false,
                T::zero(),
                &mut out,
            );
            cols
        };
        let value = Tensor::new(&[geom.n, geom.ho, geom.wo, geom.cout], out)?;
        let rg = self.rg(input) || self.rg(kernel);
        // Saved columns are only needed for the kernel gradient.
        let cols = if self.rg(kernel) { cols } else { Vec::new() };
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            rg,
            "conv2d",
        )
    }

    fn channel_count(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let c = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::shape(op, "scalar input"))?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(
                op,
                format!(
                    "{c} channels but gamma/beta have {}/{}",
                    self.value(gamma).numel(),
                    self.value(beta).numel()
                ),
            ));
        }
        Ok(c)
    }

    /// Normalizes with the batch statistics over every axis but the last.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let c = self.channel_count("batch_norm", x, gamma, beta)?;
        let xs = self.value(x).data();
        let m = xs.len() / c;
        if m == 0 {
            return Err(Error::shape("batch_norm", "empty batch"));
        }
        let mf = T::of(m as f64);
        let mut mean = vec![T::zero(); c];
        for row in xs.chunks_exact(c) {
            for (mu, &v) in mean.iter_mut().zip(row) {
                *mu += v;
            }
        }
        mean.iter_mut().for_each(|mu| *mu /= mf);
        let mut var = vec![T::zero(); c];
        for row in xs.chunks_exact(c) {
            for ((s, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - mu;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= mf);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks_exact(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(g[ch] * h + b[ch]);
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            rg,
            "batch_norm",
        )?;
        Ok((v, BatchStats { mean, var }))
    }

    /// Normalizes with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let c = self.channel_count("batch_norm", x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics extent"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks_exact(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(g[ch] * h + b[ch]);
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new_allow_empty(&shape, out)?,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            rg,
            "batch_norm",
        )
    }

    fn nhwc(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize, usize)> {
        match *self.shape(x) {
            [n, h, w, c] => Ok((n, h, w, c)),
            ref s => Err(Error::shape(op, format!("expected NHWC, got {s:?}"))),
        }
    }

    /// 2×2 average pooling with stride 2.
    pub fn down2(&mut self, x: Var) -> Result<Var> {
        let (n, h, w, c) = self.nhwc("down2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("down2", format!("odd spatial extent {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xs = self.value(x).data();
        let quarter = T::of(0.25);
        let mut out = vec![T::zero(); n * ho * wo * c];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let dst = ((b * ho + oy) * wo + ox) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let src = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                        for ch in 0..c {
                            out[dst + ch] += xs[src + ch];
                        }
                    }
                    for v in &mut out[dst..dst + c] {
                        *v *= quarter;
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(&[n, ho, wo, c], out)?,
            Op::Down2(x),
            rg,
            "down2",
        )
    }

    /// Nearest-neighbour upsampling by 2.
    pub fn up2(&mut self, x: Var) -> Result<Var> {
        let (n, h, w, c) = self.nhwc("up2", x)?;
        let (ho, wo) = (h * 2, w * 2);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); n * ho * wo * c];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let dst = ((b * ho + oy) * wo + ox) * c;
                    let src = ((b * h + oy / 2) * w + ox / 2) * c;
                    out[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, ho, wo, c], out)?, Op::Up2(x), rg, "up2")
    }

    /// Applies a [`GatherPlan`] over the positions of `x` (all axes but the
    /// last), producing `out_shape` whose last axis is the channel axis.
    pub fn gather(&mut self, x: Var, plan: GatherPlan<T>, out_shape: &[usize]) -> Result<Var> {
        let c = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::shape("gather", "scalar input"))?;
        let positions = self.value(x).numel() / c.max(1);
        if let Some(m) = plan.max_source() {
            if m >= positions {
                return Err(Error::shape(
                    "gather",
                    format!("source {m} out of {positions} positions"),
                ));
            }
        }
        if out_shape.last() != Some(&c) || out_shape.iter().product::<usize>() != plan.outputs * c {
            return Err(Error::shape(
                "gather",
                format!(
                    "out shape {out_shape:?} vs {} outputs x {c} channels",
                    plan.outputs
                ),
            ));
        }
        let out = plan.apply(self.value(x).data(), c);
        let rg = self.rg(x);
        self.push(
            Tensor::new_allow_empty(out_shape, out)?,
            Op::Gather { input: x, plan },
            rg,
            "gather",
        )
    }

    /// Concatenates along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        let lead = lead.to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != *lead {
                return Err(Error::shape("concat", format!("{s:?} vs leading {lead:?}")));
            }
            widths.push(s[lead.len()]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new_allow_empty(&shape, out)?,
            Op::Concat(parts.to_vec()),
            rg,
            "concat",
        )
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        match broadcast_shape(self.shape(x), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::shape(
                    "broadcast_to",
                    format!("{:?} -> {shape:?}", self.shape(x)),
                ))
            }
        }
        let data = expand(self.value(x).data(), self.shape(x), shape);
        let rg = self.rg(x);
        self.push(
            Tensor::new_allow_empty(shape, data)?,
            Op::BroadcastTo(x),
            rg,
            "broadcast_to",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let data = self.value(x).data().to_vec();
        let rg = self.rg(x);
        self.push(
            Tensor::new_allow_empty(shape, data)?,
            Op::Reshape(x),
            rg,
            "reshape",
        )
    }

    /// Sigmoid cross-entropy averaged over the pixels of every instance with
    /// non-zero weight, times `scale`.
    ///
    /// `logits` and `targets` share a shape whose first axis indexes
    /// instances; `instance_weights` has one entry per instance. When every
    /// weight is zero the loss is zero and no gradient flows.
    pub fn sigmoid_bce(
        &mut self,
        logits: Var,
        targets: &Tensor<T>,
        instance_weights: &[T],
        scale: T,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape != targets.shape() {
            return Err(Error::shape(
                "sigmoid_bce",
                format!("logits {shape:?} vs targets {:?}", targets.shape()),
            ));
        }
        let k = shape.first().copied().unwrap_or(1);
        if instance_weights.len() != k {
            return Err(Error::shape(
                "sigmoid_bce",
                format!("{} weights for {k} instances", instance_weights.len()),
            ));
        }
        let per = if k == 0 { 0 } else { targets.numel() / k };
        let mut wsum = T::zero();
        for &w in instance_weights {
            wsum += w;
        }
        let zs = self.value(logits).data();
        let ts = targets.data();
        let mut dlogits = vec![T::zero(); zs.len()];
        let mut total = T::zero();
        if wsum > T::zero() {
            let norm = scale / (wsum * T::of(per as f64));
            for i in 0..k {
                let w = instance_weights[i];
                if w == T::zero() {
                    continue;
                }
                let mut acc = T::zero();
                for p in i * per..(i + 1) * per {
                    let (z, t) = (zs[p], ts[p]);
                    acc += z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln();
                    dlogits[p] = (sigmoid(z) - t) * w * norm;
                }
                total += acc * w;
            }
            total *= norm;
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total),
            Op::SigmoidBce { logits, dlogits },
            rg,
            "sigmoid_bce",
        )
    }

    /// Reverse pass from a scalar loss. Gradients of every leaf that
    /// requires one are available through [`Graph::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.rg(loss) {
            return Err(Error::DetachedLoss);
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            self.backprop_node(i, &g, &mut grads)?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(contrib) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        send(v, reduce_to(g, out_shape, self.shape(v)));
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.rg(v) {
                        let o = expand(self.value(other).data(), self.shape(other), out_shape);
                        let prod: Vec<T> = g.iter().zip(&o).map(|(&x, &y)| x * y).collect();
                        send(v, reduce_to(&prod, out_shape, self.shape(v)));
                    }
                }
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|&x| x * *c).collect()),
            Op::Relu(a) => {
                let xs = self.value(*a).data();
                send(
                    *a,
                    g.iter()
                        .zip(xs)
                        .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                let ys = node.value.data();
                send(
                    *a,
                    g.iter()
                        .zip(ys)
                        .map(|(&gv, &y)| gv * y * (T::one() - y))
                        .collect(),
                );
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                send(*a, vec![g[0] / T::of(n as f64); n]);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        g,
                        false,
                        self.value(*b).data(),
                        true,
                        T::zero(),
                        &mut ga,
                    );
                    send(*a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        true,
                        g,
                        false,
                        T::zero(),
                        &mut gb,
                    );
                    send(*b, gb);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (rows, patch, cout) = (geom.rows(), geom.patch(), geom.cout);
                if self.rg(*kernel) {
                    let src: &[T] = if geom.is_pointwise() {
                        self.value(*input).data()
                    } else {
                        cols
                    };
                    let mut gk = vec![T::zero(); patch * cout];
                    T::gemm(patch, rows, cout, src, true, g, false, T::zero(), &mut gk);
                    send(*kernel, gk);
                }
                if self.rg(*input) {
                    let mut gcols = vec![T::zero(); rows * patch];
                    T::gemm(
                        rows,
                        cout,
                        patch,
                        g,
                        false,
                        self.value(*kernel).data(),
                        true,
                        T::zero(),
                        &mut gcols,
                    );
                    let gx = if geom.is_pointwise() {
                        gcols
                    } else {
                        geom.col2im(&gcols)
                    };
                    send(*input, gx);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        dgamma[ch] += grow[ch] * hrow[ch];
                        dbeta[ch] += grow[ch];
                    }
                }
                if self.rg(*input) {
                    let m = g.len() / c;
                    let mf = T::of(m as f64);
                    let mut gx = Vec::with_capacity(g.len());
                    if *batch_stats {
                        // dx = inv_std/M * (M*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                        for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for ch in 0..c {
                                let dxhat = grow[ch] * gam[ch];
                                let t = mf * dxhat
                                    - dbeta[ch] * gam[ch]
                                    - hrow[ch] * dgamma[ch] * gam[ch];
                                gx.push(t * inv_std[ch] / mf);
                            }
                        }
                    } else {
                        for grow in g.chunks_exact(c) {
                            for ch in 0..c {
                                gx.push(grow[ch] * gam[ch] * inv_std[ch]);
                            }
                        }
                    }
                    send(*input, gx);
                }
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::Down2(x) => {
                let (n, h, w, c) = self.nhwc("down2", *x)?;
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let mut gx = vec![T::zero(); n * h * w * c];
                for b in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let src = ((b * ho + y / 2) * wo + xx / 2) * c;
                            let dst = ((b * h + y) * w + xx) * c;
                            for ch in 0..c {
                                gx[dst + ch] = g[src + ch] * quarter;
                            }
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Up2(x) => {
                let (n, h, w, c) = self.nhwc("up2", *x)?;
                let (ho, wo) = (h * 2, w * 2);
                let mut gx = vec![T::zero(); n * h * w * c];
                for b in 0..n {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let src = ((b * ho + oy) * wo + ox) * c;
                            let dst = ((b * h + oy / 2) * w + ox / 2) * c;
                            for ch in 0..c {
                                gx[dst + ch] += g[src + ch];
                            }
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Gather { input, plan } => {
                let c = *self.shape(*input).last().expect("rank checked in forward");
                let positions = self.value(*input).numel() / c.max(1);
                send(*input, plan.apply_transpose(g, c, positions));
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| *self.shape(p).last().expect("rank checked"))
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = if total == 0 { 0 } else { g.len() / total };
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        send(p, gp);
                    }
                    offset += w;
                }
            }
            Op::BroadcastTo(x) => send(*x, reduce_to(g, out_shape, self.shape(*x))),
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::SigmoidBce { logits, dlogits } => {
                send(*logits, dlogits.iter().map(|&d| d * g[0]).collect());
            }
        }
        Ok(())
    }
}
