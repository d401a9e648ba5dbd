//! Dense NCHW tensors on a reverse-mode tape.
//!
//! Values are immutable once produced; every operation appends a node that
//! remembers its inputs and whatever it needs for the backward sweep. One
//! tape per training step. Kernels are plain loops with fixed accumulation
//! order, so results are bit-reproducible run to run.

use crate::det::{subseed, DetRng};

/// Element type: f32 for training, f64 for finite-difference checks.
pub trait Scalar:
    Copy
    + PartialOrd
    + Default
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> f32 {
        f32::exp(self)
    }
    fn sqrt(self) -> f32 {
        f32::sqrt(self)
    }
    fn abs(self) -> f32 {
        f32::abs(self)
    }
    fn maxv(self, other: f32) -> f32 {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    fn abs(self) -> f64 {
        f64::abs(self)
    }
    fn maxv(self, other: f64) -> f64 {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn nchw(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape { n, c, h, w }
    }

    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug)]
pub enum TensorError {
    ShapeMismatch { op: &'static str, detail: String },
    CheckerboardRisk { kernel: usize, stride: usize },
    NotScalar { count: usize },
}

impl std::fmt::Display for TensorError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, detail } => {
                write!(f, "{}: shape mismatch ({})", op, detail)
            }
            TensorError::CheckerboardRisk { kernel, stride } => write!(
                f,
                "transposed conv kernel {} not divisible by stride {}",
                kernel, stride
            ),
            TensorError::NotScalar { count } => {
                write!(f, "backward needs a scalar loss, got {} elements", count)
            }
        }
    }
}

impl std::error::Error for TensorError {}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

enum Op<T> {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    ConvT2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    /// `coupled` marks train mode, where the batch statistics depend on x.
    BatchNorm { x: NodeId, gain: NodeId, shift: NodeId, coupled: bool, invstd: Vec<T>, xhat: Vec<T> },
    Relu { x: NodeId },
    LeakyRelu { x: NodeId },
    Sigmoid { x: NodeId },
    MaxPool { x: NodeId, arg: Vec<u32> },
    BilinearUp { x: NodeId },
    Gap { x: NodeId },
    Gmp { x: NodeId, arg: Vec<u32> },
    AvgC { x: NodeId },
    MaxC { x: NodeId, arg: Vec<u32> },
    Concat { x: NodeId, y: NodeId },
    MulB { x: NodeId, g: NodeId },
    Add { x: NodeId, y: NodeId },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Dropout { x: NodeId, keep: Vec<T> },
    L1 { x: NodeId, t: NodeId },
}

struct Node<T> {
    shape: Shape,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    needs: bool,
    op: Op<T>,
}

/// Named parameter tensor plus its data; `trainable: false` marks running
/// statistics and other buffers that the optimizer must skip.
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<T>,
    pub trainable: bool,
}

pub struct ParamStore<T> {
    pub entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn register(&mut self, name: &str, shape: Shape, data: Vec<T>, trainable: bool) -> usize {
        assert_eq!(shape.count(), data.len(), "param {} data length", name);
        assert!(self.index_of(name).is_none(), "duplicate param {}", name);
        self.entries.push(ParamEntry { name: name.to_string(), shape, data, trainable });
        self.entries.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.data.len()).sum()
    }

    /// Same parameters at a different precision (f32 training checkpoints
    /// replayed through the f64 gradient-check path and back).
    pub fn convert<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape,
                    data: e.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    pub mode: Mode,
    param_nodes: Vec<(usize, NodeId)>,
    stat_updates: Vec<(usize, Vec<T>)>,
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

impl<T: Scalar> Tape<T> {
    pub fn new(mode: Mode) -> Self {
        Tape { nodes: Vec::new(), mode, param_nodes: Vec::new(), stat_updates: Vec::new() }
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, shape: Shape, value: Vec<T>, needs: bool, op: Op<T>) -> NodeId {
        debug_assert_eq!(shape.count(), value.len());
        self.nodes.push(Node { shape, value, grad: None, needs, op });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs
    }

    /// Constant leaf: inputs, targets, anything gradients never reach.
    pub fn constant(&mut self, shape: Shape, value: Vec<T>) -> NodeId {
        self.push(shape, value, false, Op::Leaf)
    }

    /// Differentiable leaf, for gradient checks on raw tensors.
    pub fn variable(&mut self, shape: Shape, value: Vec<T>) -> NodeId {
        self.push(shape, value, true, Op::Leaf)
    }

    /// Leaf backed by a parameter store entry. Memoized: asking for the same
    /// entry twice returns the same node, so shared weights accumulate one
    /// gradient buffer.
    pub fn param(&mut self, store: &ParamStore<T>, ix: usize) -> NodeId {
        if let Some(&(_, id)) = self.param_nodes.iter().find(|&&(i, _)| i == ix) {
            return id;
        }
        let e = &store.entries[ix];
        let id = self.push(e.shape, e.data.clone(), e.trainable, Op::Leaf);
        self.param_nodes.push((ix, id));
        id
    }

    /// (store index, node) pairs created by `param`, in first-use order.
    pub fn param_links(&self) -> &[(usize, NodeId)] {
        &self.param_nodes
    }

    /// Running-statistic writes produced by train-mode batch norm, to be
    /// applied to the store after the step.
    pub fn take_stat_updates(&mut self) -> Vec<(usize, Vec<T>)> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if ws.c != xs.c {
            return Err(mismatch("conv2d", format!("kernel wants C={}, input has C={}", ws.c, xs.c)));
        }
        if bs.count() != ws.n {
            return Err(mismatch("conv2d", format!("bias {} for {} filters", bs.count(), ws.n)));
        }
        if stride == 0 || xs.h + 2 * pad < ws.h || xs.w + 2 * pad < ws.w {
            return Err(mismatch("conv2d", format!("{} kernel {}x{} stride {} pad {}", xs, ws.h, ws.w, stride, pad)));
        }
        let os = Shape::nchw(
            xs.n,
            ws.n,
            (xs.h + 2 * pad - ws.h) / stride + 1,
            (xs.w + 2 * pad - ws.w) / stride + 1,
        );
        let mut out = vec![T::ZERO; os.count()];
        conv2d_fwd(
            self.value(x),
            xs,
            self.value(w),
            ws,
            self.value(b),
            stride,
            pad,
            &mut out,
            os,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(os, out, needs, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Weights are (C_in, C_out, k_h, k_w); rejects kernels whose size is not
    /// divisible by the stride.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if ws.n != xs.c {
            return Err(mismatch("conv_transpose2d", format!("kernel wants C={}, input has C={}", ws.n, xs.c)));
        }
        if bs.count() != ws.c {
            return Err(mismatch("conv_transpose2d", format!("bias {} for {} filters", bs.count(), ws.c)));
        }
        if ws.h % stride != 0 || ws.w % stride != 0 {
            return Err(TensorError::CheckerboardRisk { kernel: ws.h.max(ws.w), stride });
        }
        let oh = (xs.h - 1) * stride + ws.h;
        let ow = (xs.w - 1) * stride + ws.w;
        if oh < 2 * pad || ow < 2 * pad {
            return Err(mismatch("conv_transpose2d", format!("{} pad {}", xs, pad)));
        }
        let os = Shape::nchw(xs.n, ws.c, oh - 2 * pad, ow - 2 * pad);
        let mut out = vec![T::ZERO; os.count()];
        convt_fwd(self.value(x), xs, self.value(w), ws, self.value(b), stride, pad, &mut out, os);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(os, out, needs, Op::ConvT2d { x, w, b, stride, pad }))
    }

    /// Train mode normalizes with batch statistics over (N,H,W) per channel
    /// and queues a running-statistics update for `rmean_ix`/`rvar_ix`; eval
    /// mode normalizes with the stored running statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
        store: &ParamStore<T>,
        rmean_ix: usize,
        rvar_ix: usize,
        momentum: f64,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let xs = self.shape(x);
        let c = xs.c;
        if self.shape(gain).count() != c || self.shape(shift).count() != c {
            return Err(mismatch("batch_norm", format!("gain/shift for C={}", c)));
        }
        let m = xs.n * xs.h * xs.w;
        let plane = xs.h * xs.w;
        let train = matches!(self.mode, Mode::Train { .. });
        let xv = self.value(x);
        let mut mean = vec![T::ZERO; c];
        let mut var = vec![T::ZERO; c];
        if train {
            let inv_m = T::from_f64(1.0 / m as f64);
            for ch in 0..c {
                let mut acc = T::ZERO;
                for n in 0..xs.n {
                    let base = (n * c + ch) * plane;
                    for i in 0..plane {
                        acc += xv[base + i];
                    }
                }
                mean[ch] = acc * inv_m;
                let mu = mean[ch];
                let mut vacc = T::ZERO;
                for n in 0..xs.n {
                    let base = (n * c + ch) * plane;
                    for i in 0..plane {
                        let d = xv[base + i] - mu;
                        vacc += d * d;
                    }
                }
                var[ch] = vacc * inv_m;
            }
        } else {
            mean.copy_from_slice(&store.entries[rmean_ix].data);
            var.copy_from_slice(&store.entries[rvar_ix].data);
        }
        let epsv = T::from_f64(eps);
        let invstd: Vec<T> = var.iter().map(|&v| T::ONE / (v + epsv).sqrt()).collect();
        let gv = self.value(gain).to_vec();
        let sv = self.value(shift).to_vec();
        let mut xhat = vec![T::ZERO; xs.count()];
        let mut out = vec![T::ZERO; xs.count()];
        let xv = self.value(x);
        for n in 0..xs.n {
            for ch in 0..c {
                let base = (n * c + ch) * plane;
                let (mu, isd, g, s) = (mean[ch], invstd[ch], gv[ch], sv[ch]);
                for i in 0..plane {
                    let xh = (xv[base + i] - mu) * isd;
                    xhat[base + i] = xh;
                    out[base + i] = g * xh + s;
                }
            }
        }
        if train {
            let mom = T::from_f64(momentum);
            let keep = T::from_f64(1.0 - momentum);
            // Running variance stores the unbiased estimate.
            let bessel = if m > 1 { T::from_f64(m as f64 / (m as f64 - 1.0)) } else { T::ONE };
            let new_mean: Vec<T> = store.entries[rmean_ix]
                .data
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| keep * r + mom * b)
                .collect();
            let new_var: Vec<T> = store.entries[rvar_ix]
                .data
                .iter()
                .zip(&var)
                .map(|(&r, &b)| keep * r + mom * b * bessel)
                .collect();
            self.stat_updates.push((rmean_ix, new_mean));
            self.stat_updates.push((rvar_ix, new_var));
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(shift);
        Ok(self.push(xs, out, needs, Op::BatchNorm { x, gain, shift, coupled: train, invstd, xhat }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x);
        let out: Vec<T> = self.value(x).iter().map(|&v| v.maxv(T::ZERO)).collect();
        let needs = self.needs(x);
        self.push(xs, out, needs, Op::Relu { x })
    }

    /// Negative slope fixed at 0.2.
    pub fn leaky_relu(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x);
        let slope = T::from_f64(0.2);
        let out: Vec<T> =
            self.value(x).iter().map(|&v| if v > T::ZERO { v } else { slope * v }).collect();
        let needs = self.needs(x);
        self.push(xs, out, needs, Op::LeakyRelu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x);
        let out: Vec<T> = self.value(x).iter().map(|&v| T::ONE / (T::ONE + (-v).exp())).collect();
        let needs = self.needs(x);
        self.push(xs, out, needs, Op::Sigmoid { x })
    }

    pub fn max_pool_2x2(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(x);
        if xs.h % 2 != 0 || xs.w % 2 != 0 {
            return Err(mismatch("max_pool_2x2", format!("odd spatial dims in {}", xs)));
        }
        let os = Shape::nchw(xs.n, xs.c, xs.h / 2, xs.w / 2);
        let mut out = vec![T::ZERO; os.count()];
        let mut arg = vec![0u32; os.count()];
        let xv = self.value(x);
        for nc in 0..xs.n * xs.c {
            let ibase = nc * xs.h * xs.w;
            let obase = nc * os.h * os.w;
            for oi in 0..os.h {
                for oj in 0..os.w {
                    let i0 = ibase + (2 * oi) * xs.w + 2 * oj;
                    // Ties resolve to the earliest index in scan order.
                    let cand = [i0, i0 + 1, i0 + xs.w, i0 + xs.w + 1];
                    let mut best = cand[0];
                    for &ci in &cand[1..] {
                        if xv[ci] > xv[best] {
                            best = ci;
                        }
                    }
                    out[obase + oi * os.w + oj] = xv[best];
                    arg[obase + oi * os.w + oj] = best as u32;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(os, out, needs, Op::MaxPool { x, arg }))
    }

    /// Doubles H and W, align-corners-false convention with edge clamping.
    pub fn bilinear_up_2x(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x);
        let os = Shape::nchw(xs.n, xs.c, xs.h * 2, xs.w * 2);
        let mut out = vec![T::ZERO; os.count()];
        let (rw, cw) = (axis_weights(xs.h), axis_weights(xs.w));
        let xv = self.value(x);
        for nc in 0..xs.n * xs.c {
            let ibase = nc * xs.h * xs.w;
            let obase = nc * os.h * os.w;
            for oi in 0..os.h {
                let (i0, i1, ti) = rw[oi];
                let wi0 = T::from_f64(1.0 - ti);
                let wi1 = T::from_f64(ti);
                for oj in 0..os.w {
                    let (j0, j1, tj) = cw[oj];
                    let wj0 = T::from_f64(1.0 - tj);
                    let wj1 = T::from_f64(tj);
                    let v = wi0 * (wj0 * xv[ibase + i0 * xs.w + j0] + wj1 * xv[ibase + i0 * xs.w + j1])
                        + wi1 * (wj0 * xv[ibase + i1 * xs.w + j0] + wj1 * xv[ibase + i1 * xs.w + j1]);
                    out[obase + oi * os.w + oj] = v;
                }
            }
        }
        let needs = self.needs(x);
        self.push(os, out, needs, Op::BilinearUp { x })
    }

    /// Spatial mean per (n, c): output N×C×1×1.
    pub fn gap_spatial(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x);
        let plane = xs.h * xs.w;
        let inv = T::from_f64(1.0 / plane as f64);
        let xv = self.value(x);
        let out: Vec<T> = (0..xs.n * xs.c)
            .map(|nc| {
                let mut acc = T::ZERO;
                for i in 0..plane {
                    acc += xv[nc * plane + i];
                }
                acc * inv
            })
            .collect();
        let needs = self.needs(x);
        self.push(Shape::nchw(xs.n, xs.c, 1, 1), out, needs, Op::Gap { x })
    }

    /// Spatial max per (n, c): output N×C×1×1.
    pub fn gmp_spatial(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x);
        let plane = xs.h * xs.w;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xs.n * xs.c);
        let mut arg = Vec::with_capacity(xs.n * xs.c);
        for nc in 0..xs.n * xs.c {
            let mut best = nc * plane;
            for i in 1..plane {
                if xv[nc * plane + i] > xv[best] {
                    best = nc * plane + i;
                }
            }
            out.push(xv[best]);
            arg.push(best as u32);
        }
        let needs = self.needs(x);
        self.push(Shape::nchw(xs.n, xs.c, 1, 1), out, needs, Op::Gmp { x, arg })
    }

    /// Channel mean per pixel: output N×1×H×W.
    pub fn avg_over_channels(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x);
        let plane = xs.h * xs.w;
        let inv = T::from_f64(1.0 / xs.c as f64);
        let xv = self.value(x);
        let mut out = vec![T::ZERO; xs.n * plane];
        for n in 0..xs.n {
            for ch in 0..xs.c {
                let ibase = (n * xs.c + ch) * plane;
                let obase = n * plane;
                for i in 0..plane {
                    out[obase + i] += xv[ibase + i];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        let needs = self.needs(x);
        self.push(Shape::nchw(xs.n, 1, xs.h, xs.w), out, needs, Op::AvgC { x })
    }

    /// Channel max per pixel: output N×1×H×W.
    pub fn max_over_channels(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x);
        let plane = xs.h * xs.w;
        let xv = self.value(x);
        let mut out = vec![T::ZERO; xs.n * plane];
        let mut arg = vec![0u32; xs.n * plane];
        for n in 0..xs.n {
            for i in 0..plane {
                let mut best = (n * xs.c) * plane + i;
                for ch in 1..xs.c {
                    let cand = (n * xs.c + ch) * plane + i;
                    if xv[cand] > xv[best] {
                        best = cand;
                    }
                }
                out[n * plane + i] = xv[best];
                arg[n * plane + i] = best as u32;
            }
        }
        let needs = self.needs(x);
        self.push(Shape::nchw(xs.n, 1, xs.h, xs.w), out, needs, Op::MaxC { x, arg })
    }

    pub fn concat_channels(&mut self, x: NodeId, y: NodeId) -> Result<NodeId, TensorError> {
        let (xs, ys) = (self.shape(x), self.shape(y));
        if xs.n != ys.n || xs.h != ys.h || xs.w != ys.w {
            return Err(mismatch("concat_channels", format!("{} vs {}", xs, ys)));
        }
        let os = Shape::nchw(xs.n, xs.c + ys.c, xs.h, xs.w);
        let plane = xs.h * xs.w;
        let mut out = vec![T::ZERO; os.count()];
        let (xv, yv) = (self.value(x), self.value(y));
        for n in 0..xs.n {
            let ob = n * os.c * plane;
            out[ob..ob + xs.c * plane]
                .copy_from_slice(&xv[n * xs.c * plane..(n + 1) * xs.c * plane]);
            out[ob + xs.c * plane..ob + os.c * plane]
                .copy_from_slice(&yv[n * ys.c * plane..(n + 1) * ys.c * plane]);
        }
        let needs = self.needs(x) || self.needs(y);
        Ok(self.push(os, out, needs, Op::Concat { x, y }))
    }

    /// Elementwise product. `g` may match x exactly, or broadcast as a
    /// channel gate (N×C×1×1) or a spatial gate (N×1×H×W).
    pub fn mul_broadcast(&mut self, x: NodeId, g: NodeId) -> Result<NodeId, TensorError> {
        let (xs, gs) = (self.shape(x), self.shape(g));
        let ok = gs == xs
            || (gs.n == xs.n && gs.c == xs.c && gs.h == 1 && gs.w == 1)
            || (gs.n == xs.n && gs.c == 1 && gs.h == xs.h && gs.w == xs.w);
        if !ok {
            return Err(mismatch("mul_broadcast", format!("gate {} against {}", gs, xs)));
        }
        let plane = xs.h * xs.w;
        let (xv, gv) = (self.value(x), self.value(g));
        let mut out = vec![T::ZERO; xs.count()];
        if gs == xs {
            for i in 0..out.len() {
                out[i] = xv[i] * gv[i];
            }
        } else if gs.h == 1 && gs.w == 1 {
            for n in 0..xs.n {
                for ch in 0..xs.c {
                    let gvv = gv[n * xs.c + ch];
                    let base = (n * xs.c + ch) * plane;
                    for i in 0..plane {
                        out[base + i] = xv[base + i] * gvv;
                    }
                }
            }
        } else {
            for n in 0..xs.n {
                for ch in 0..xs.c {
                    let base = (n * xs.c + ch) * plane;
                    let gbase = n * plane;
                    for i in 0..plane {
                        out[base + i] = xv[base + i] * gv[gbase + i];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(g);
        Ok(self.push(xs, out, needs, Op::MulB { x, g }))
    }

    pub fn add(&mut self, x: NodeId, y: NodeId) -> Result<NodeId, TensorError> {
        let (xs, ys) = (self.shape(x), self.shape(y));
        if xs != ys {
            return Err(mismatch("add", format!("{} vs {}", xs, ys)));
        }
        let (xv, yv) = (self.value(x), self.value(y));
        let out: Vec<T> = xv.iter().zip(yv).map(|(&a, &b)| a + b).collect();
        let needs = self.needs(x) || self.needs(y);
        Ok(self.push(xs, out, needs, Op::Add { x, y }))
    }

    /// Affine map on flattened features: x is N×K (K = C·H·W), weights
    /// (C_out, K), output N×C_out×1×1.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        let k = xs.c * xs.h * xs.w;
        if ws.c * ws.h * ws.w != k {
            return Err(mismatch("dense", format!("weights {} against K={}", ws, k)));
        }
        if bs.count() != ws.n {
            return Err(mismatch("dense", format!("bias {} for {} rows", bs.count(), ws.n)));
        }
        let co = ws.n;
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![T::ZERO; xs.n * co];
        for n in 0..xs.n {
            for o in 0..co {
                let mut acc = bv[o];
                let wrow = o * k;
                let xrow = n * k;
                for i in 0..k {
                    acc += wv[wrow + i] * xv[xrow + i];
                }
                out[n * co + o] = acc;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Shape::nchw(xs.n, co, 1, 1), out, needs, Op::Dense { x, w, b }))
    }

    /// Train mode zeroes each element with probability `rate` and scales
    /// survivors by 1/(1−rate); the mask is a pure function of the tape mode
    /// seed and this node's position. Eval mode and rate 0 are the identity
    /// (the input node is returned unchanged).
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate {}", rate);
        let seed = match self.mode {
            Mode::Train { seed } if rate > 0.0 => seed,
            _ => return x,
        };
        let xs = self.shape(x);
        let mut rng = DetRng::seeded(subseed(seed, self.nodes.len() as u64));
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let keep: Vec<T> = (0..xs.count())
            .map(|_| if rng.uniform() >= rate { scale } else { T::ZERO })
            .collect();
        let out: Vec<T> = self.value(x).iter().zip(&keep).map(|(&v, &k)| v * k).collect();
        let needs = self.needs(x);
        self.push(xs, out, needs, Op::Dropout { x, keep })
    }

    /// Mean absolute error with the ½ prefactor: Σ|x−t| / (2·N·H·W).
    /// Channels are summed, not averaged.
    pub fn l1_loss(&mut self, x: NodeId, t: NodeId) -> Result<NodeId, TensorError> {
        let (xs, ts) = (self.shape(x), self.shape(t));
        if xs != ts {
            return Err(mismatch("l1_loss", format!("{} vs {}", xs, ts)));
        }
        let (xv, tv) = (self.value(x), self.value(t));
        let mut acc = T::ZERO;
        for i in 0..xv.len() {
            acc += (xv[i] - tv[i]).abs();
        }
        let denom = T::from_f64(2.0 * (xs.n * xs.h * xs.w) as f64);
        let needs = self.needs(x) || self.needs(t);
        Ok(self.push(Shape::nchw(1, 1, 1, 1), vec![acc / denom], needs, Op::L1 { x, t }))
    }

    /// Reverse sweep from a scalar loss; fills gradient buffers on every
    /// node that requires them. Gradients accumulate additively across uses.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        let count = self.shape(loss).count();
        if count != 1 {
            return Err(TensorError::NotScalar { count });
        }
        if !self.needs(loss) {
            return Ok(());
        }
        for node in self.nodes.iter_mut() {
            if node.needs {
                node.grad = Some(vec![T::ZERO; node.shape.count()]);
            }
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = T::ONE;
        for s in (0..=loss.0).rev() {
            if !self.nodes[s].needs {
                continue;
            }
            self.route(s);
        }
        Ok(())
    }

    /// Propagates node s's gradient into its inputs.
    fn route(&mut self, s: usize) {
        // Split borrows: take the output grad out, put it back after.
        let gout = match self.nodes[s].grad.take() {
            Some(g) => g,
            None => return,
        };
        let os = self.nodes[s].shape;
        match &self.nodes[s].op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.shape(x);
                let ws = self.shape(w);
                let xv = self.nodes[x.0].value.clone();
                let wv = self.nodes[w.0].value.clone();
                if self.needs(x) {
                    let mut dx = vec![T::ZERO; xs.count()];
                    conv2d_back_x(&wv, ws, &gout, os, stride, pad, &mut dx, xs);
                    self.accum(x, &dx);
                }
                if self.needs(w) {
                    let mut dw = vec![T::ZERO; ws.count()];
                    conv2d_back_w(&xv, xs, &gout, os, stride, pad, &mut dw, ws);
                    self.accum(w, &dw);
                }
                if self.needs(b) {
                    let plane = os.h * os.w;
                    let mut db = vec![T::ZERO; os.c];
                    for n in 0..os.n {
                        for co in 0..os.c {
                            let base = (n * os.c + co) * plane;
                            for i in 0..plane {
                                db[co] += gout[base + i];
                            }
                        }
                    }
                    self.accum(b, &db);
                }
            }
            &Op::ConvT2d { x, w, b, stride, pad } => {
                let xs = self.shape(x);
                let ws = self.shape(w);
                let xv = self.nodes[x.0].value.clone();
                let wv = self.nodes[w.0].value.clone();
                if self.needs(x) {
                    let mut dx = vec![T::ZERO; xs.count()];
                    convt_back_x(&wv, ws, &gout, os, stride, pad, &mut dx, xs);
                    self.accum(x, &dx);
                }
                if self.needs(w) {
                    let mut dw = vec![T::ZERO; ws.count()];
                    convt_back_w(&xv, xs, &gout, os, stride, pad, &mut dw, ws);
                    self.accum(w, &dw);
                }
                if self.needs(b) {
                    let plane = os.h * os.w;
                    let mut db = vec![T::ZERO; os.c];
                    for n in 0..os.n {
                        for co in 0..os.c {
                            let base = (n * os.c + co) * plane;
                            for i in 0..plane {
                                db[co] += gout[base + i];
                            }
                        }
                    }
                    self.accum(b, &db);
                }
            }
            Op::BatchNorm { x, gain, shift, coupled, invstd, xhat } => {
                let (x, gain, shift, coupled) = (*x, *gain, *shift, *coupled);
                let xs = self.shape(x);
                let c = xs.c;
                let plane = xs.h * xs.w;
                let m = xs.n * plane;
                let invstd = invstd.clone();
                let xhat = xhat.clone();
                let gv = self.nodes[gain.0].value.clone();
                let mut s1 = vec![T::ZERO; c];
                let mut s2 = vec![T::ZERO; c];
                for n in 0..xs.n {
                    for ch in 0..c {
                        let base = (n * c + ch) * plane;
                        for i in 0..plane {
                            s1[ch] += gout[base + i];
                            s2[ch] += gout[base + i] * xhat[base + i];
                        }
                    }
                }
                if self.needs(x) {
                    let mut dx = vec![T::ZERO; xs.count()];
                    let inv_m = T::from_f64(1.0 / m as f64);
                    for n in 0..xs.n {
                        for ch in 0..c {
                            let base = (n * c + ch) * plane;
                            let k = gv[ch] * invstd[ch];
                            for i in 0..plane {
                                dx[base + i] = if coupled {
                                    k * (gout[base + i] - (s1[ch] + xhat[base + i] * s2[ch]) * inv_m)
                                } else {
                                    k * gout[base + i]
                                };
                            }
                        }
                    }
                    self.accum(x, &dx);
                }
                if self.needs(gain) {
                    self.accum(gain, &s2);
                }
                if self.needs(shift) {
                    self.accum(shift, &s1);
                }
            }
            &Op::Relu { x } => {
                if self.needs(x) {
                    let xv = &self.nodes[x.0].value;
                    let dx: Vec<T> = xv
                        .iter()
                        .zip(&gout)
                        .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
                        .collect();
                    self.accum(x, &dx);
                }
            }
            &Op::LeakyRelu { x } => {
                if self.needs(x) {
                    let slope = T::from_f64(0.2);
                    let xv = &self.nodes[x.0].value;
                    let dx: Vec<T> = xv
                        .iter()
                        .zip(&gout)
                        .map(|(&v, &g)| if v > T::ZERO { g } else { slope * g })
                        .collect();
                    self.accum(x, &dx);
                }
            }
            &Op::Sigmoid { x } => {
                if self.needs(x) {
                    let yv = &self.nodes[s].value;
                    let dx: Vec<T> =
                        yv.iter().zip(&gout).map(|(&y, &g)| g * y * (T::ONE - y)).collect();
                    self.accum(x, &dx);
                }
            }
            Op::MaxPool { x, arg } => {
                let x = *x;
                if self.needs(x) {
                    let mut dx = vec![T::ZERO; self.shape(x).count()];
                    for (i, &a) in arg.iter().enumerate() {
                        dx[a as usize] += gout[i];
                    }
                    self.accum(x, &dx);
                }
            }
            &Op::BilinearUp { x } => {
                if self.needs(x) {
                    let xs = self.shape(x);
                    let mut dx = vec![T::ZERO; xs.count()];
                    let (rw, cw) = (axis_weights(xs.h), axis_weights(xs.w));
                    for nc in 0..xs.n * xs.c {
                        let ibase = nc * xs.h * xs.w;
                        let obase = nc * os.h * os.w;
                        for oi in 0..os.h {
                            let (i0, i1, ti) = rw[oi];
                            let wi0 = T::from_f64(1.0 - ti);
                            let wi1 = T::from_f64(ti);
                            for oj in 0..os.w {
                                let (j0, j1, tj) = cw[oj];
                                let g = gout[obase + oi * os.w + oj];
                                let wj0 = T::from_f64(1.0 - tj);
                                let wj1 = T::from_f64(tj);
                                dx[ibase + i0 * xs.w + j0] += wi0 * wj0 * g;
                                dx[ibase + i0 * xs.w + j1] += wi0 * wj1 * g;
                                dx[ibase + i1 * xs.w + j0] += wi1 * wj0 * g;
                                dx[ibase + i1 * xs.w + j1] += wi1 * wj1 * g;
                            }
                        }
                    }
                    self.accum(x, &dx);
                }
            }
            &Op::Gap { x } => {
                if self.needs(x) {
                    let xs = self.shape(x);
                    let plane = xs.h * xs.w;
                    let inv = T::from_f64(1.0 / plane as f64);
                    let mut dx = vec![T::ZERO; xs.count()];
                    for nc in 0..xs.n * xs.c {
                        let g = gout[nc] * inv;
                        for i in 0..plane {
                            dx[nc * plane + i] = g;
                        }
                    }
                    self.accum(x, &dx);
                }
            }
            Op::Gmp { x, arg } => {
                let x = *x;
                if self.needs(x) {
                    let mut dx = vec![T::ZERO; self.shape(x).count()];
                    for (i, &a) in arg.iter().enumerate() {
                        dx[a as usize] += gout[i];
                    }
                    self.accum(x, &dx);
                }
            }
            &Op::AvgC { x } => {
                if self.needs(x) {
                    let xs = self.shape(x);
                    let plane = xs.h * xs.w;
                    let inv = T::from_f64(1.0 / xs.c as f64);
                    let mut dx = vec![T::ZERO; xs.count()];
                    for n in 0..xs.n {
                        for ch in 0..xs.c {
                            let base = (n * xs.c + ch) * plane;
                            for i in 0..plane {
                                dx[base + i] = gout[n * plane + i] * inv;
                            }
                        }
                    }
                    self.accum(x, &dx);
                }
            }
            Op::MaxC { x, arg } => {
                let x = *x;
                if self.needs(x) {
                    let mut dx = vec![T::ZERO; self.shape(x).count()];
                    for (i, &a) in arg.iter().enumerate() {
                        dx[a as usize] += gout[i];
                    }
                    self.accum(x, &dx);
                }
            }
            &Op::Concat { x, y } => {
                let (xs, ys) = (self.shape(x), self.shape(y));
                let plane = xs.h * xs.w;
                let oc = xs.c + ys.c;
                if self.needs(x) {
                    let mut dx = vec![T::ZERO; xs.count()];
                    for n in 0..xs.n {
                        let ob = n * oc * plane;
                        dx[n * xs.c * plane..(n + 1) * xs.c * plane]
                            .copy_from_slice(&gout[ob..ob + xs.c * plane]);
                    }
                    self.accum(x, &dx);
                }
                if self.needs(y) {
                    let mut dy = vec![T::ZERO; ys.count()];
                    for n in 0..xs.n {
                        let ob = n * oc * plane + xs.c * plane;
                        dy[n * ys.c * plane..(n + 1) * ys.c * plane]
                            .copy_from_slice(&gout[ob..ob + ys.c * plane]);
                    }
                    self.accum(y, &dy);
                }
            }
            &Op::MulB { x, g } => {
                let (xs, gs) = (self.shape(x), self.shape(g));
                let plane = xs.h * xs.w;
                let xv = self.nodes[x.0].value.clone();
                let gv = self.nodes[g.0].value.clone();
                if self.needs(x) {
                    let mut dx = vec![T::ZERO; xs.count()];
                    if gs == xs {
                        for i in 0..dx.len() {
                            dx[i] = gout[i] * gv[i];
                        }
                    } else if gs.h == 1 && gs.w == 1 {
                        for n in 0..xs.n {
                            for ch in 0..xs.c {
                                let base = (n * xs.c + ch) * plane;
                                let gg = gv[n * xs.c + ch];
                                for i in 0..plane {
                                    dx[base + i] = gout[base + i] * gg;
                                }
                            }
                        }
                    } else {
                        for n in 0..xs.n {
                            for ch in 0..xs.c {
                                let base = (n * xs.c + ch) * plane;
                                for i in 0..plane {
                                    dx[base + i] = gout[base + i] * gv[n * plane + i];
                                }
                            }
                        }
                    }
                    self.accum(x, &dx);
                }
                if self.needs(g) {
                    let mut dg = vec![T::ZERO; gs.count()];
                    if gs == xs {
                        for i in 0..dg.len() {
                            dg[i] = gout[i] * xv[i];
                        }
                    } else if gs.h == 1 && gs.w == 1 {
                        for n in 0..xs.n {
                            for ch in 0..xs.c {
                                let base = (n * xs.c + ch) * plane;
                                let mut acc = T::ZERO;
                                for i in 0..plane {
                                    acc += gout[base + i] * xv[base + i];
                                }
                                dg[n * xs.c + ch] = acc;
                            }
                        }
                    } else {
                        for n in 0..xs.n {
                            for ch in 0..xs.c {
                                let base = (n * xs.c + ch) * plane;
                                for i in 0..plane {
                                    dg[n * plane + i] += gout[base + i] * xv[base + i];
                                }
                            }
                        }
                    }
                    self.accum(g, &dg);
                }
            }
            &Op::Add { x, y } => {
                if self.needs(x) {
                    self.accum(x, &gout);
                }
                if self.needs(y) {
                    self.accum(y, &gout);
                }
            }
            &Op::Dense { x, w, b } => {
                let xs = self.shape(x);
                let ws = self.shape(w);
                let k = xs.c * xs.h * xs.w;
                let co = ws.n;
                let xv = self.nodes[x.0].value.clone();
                let wv = self.nodes[w.0].value.clone();
                if self.needs(x) {
                    let mut dx = vec![T::ZERO; xs.count()];
                    for n in 0..xs.n {
                        for o in 0..co {
                            let g = gout[n * co + o];
                            let wrow = o * k;
                            let xrow = n * k;
                            for i in 0..k {
                                dx[xrow + i] += g * wv[wrow + i];
                            }
                        }
                    }
                    self.accum(x, &dx);
                }
                if self.needs(w) {
                    let mut dw = vec![T::ZERO; ws.count()];
                    for n in 0..xs.n {
                        for o in 0..co {
                            let g = gout[n * co + o];
                            let wrow = o * k;
                            let xrow = n * k;
                            for i in 0..k {
                                dw[wrow + i] += g * xv[xrow + i];
                            }
                        }
                    }
                    self.accum(w, &dw);
                }
                if self.needs(b) {
                    let mut db = vec![T::ZERO; co];
                    for n in 0..xs.n {
                        for o in 0..co {
                            db[o] += gout[n * co + o];
                        }
                    }
                    self.accum(b, &db);
                }
            }
            Op::Dropout { x, keep } => {
                let x = *x;
                if self.needs(x) {
                    let dx: Vec<T> = keep.iter().zip(&gout).map(|(&k, &g)| k * g).collect();
                    self.accum(x, &dx);
                }
            }
            &Op::L1 { x, t } => {
                let xs = self.shape(x);
                let scale = gout[0] / T::from_f64(2.0 * (xs.n * xs.h * xs.w) as f64);
                let xv = self.nodes[x.0].value.clone();
                let tv = self.nodes[t.0].value.clone();
                if self.needs(x) {
                    let dx: Vec<T> = xv
                        .iter()
                        .zip(&tv)
                        .map(|(&a, &b)| {
                            if a > b {
                                scale
                            } else if a < b {
                                -scale
                            } else {
                                T::ZERO
                            }
                        })
                        .collect();
                    self.accum(x, &dx);
                }
                if self.needs(t) {
                    let dt: Vec<T> = xv
                        .iter()
                        .zip(&tv)
                        .map(|(&a, &b)| {
                            if b > a {
                                scale
                            } else if b < a {
                                -scale
                            } else {
                                T::ZERO
                            }
                        })
                        .collect();
                    self.accum(t, &dt);
                }
            }
        }
        self.nodes[s].grad = Some(gout);
    }

    fn accum(&mut self, id: NodeId, delta: &[T]) {
        let g = self.nodes[id.0].grad.as_mut().expect("grad buffer");
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi += d;
        }
    }
}

/// Bilinear weights for one axis doubled with align-corners-false: source
/// coordinate (o + 0.5)/2 − 0.5, clamped to the edges.
fn axis_weights(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let src = src.max(0.0).min(len as f64 - 1.0);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Valid output-column range [lo, hi) such that o*stride + k - pad lands in
/// [0, in_len).
fn span(out_len: usize, in_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k + stride - 1) / stride };
    let hi = if in_len + pad > k { ((in_len + pad - k - 1) / stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

/// One output row gaining a full 3-tap pass: o[t] += a·x[t-1] + b·x[t] +
/// c·x[t+1], with the out-of-range tap dropped at each end. `o` and `x`
/// must share a length of at least 2.
fn row_tap3<T: Scalar>(o: &mut [T], x: &[T], a: T, b: T, c: T) {
    let n = o.len();
    o[0] += b * x[0] + c * x[1];
    for (((ov, &xl), &xm), &xr) in
        o[1..n - 1].iter_mut().zip(&x[..n - 2]).zip(&x[1..n - 1]).zip(&x[2..])
    {
        *ov += a * xl + b * xm + c * xr;
    }
    o[n - 1] += a * x[n - 2] + b * x[n - 1];
}

/// Dot product with four independent partial sums so the lanes vectorize.
fn dot4<T: Scalar>(p: &[T], q: &[T]) -> T {
    let mut s = [T::ZERO; 4];
    let cp = p.chunks_exact(4);
    let cq = q.chunks_exact(4);
    let (rp, rq) = (cp.remainder(), cq.remainder());
    for (pa, pb) in cp.zip(cq) {
        s[0] += pa[0] * pb[0];
        s[1] += pa[1] * pb[1];
        s[2] += pa[2] * pb[2];
        s[3] += pa[3] * pb[3];
    }
    let mut t = (s[0] + s[1]) + (s[2] + s[3]);
    for (&a, &b) in rp.iter().zip(rq) {
        t += a * b;
    }
    t
}

fn is_tap3(ws: Shape, stride: usize, pad: usize, width: usize) -> bool {
    ws.h == 3 && ws.w == 3 && stride == 1 && pad == 1 && width >= 2
}

fn conv2d_fwd<T: Scalar>(
    x: &[T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    b: &[T],
    stride: usize,
    pad: usize,
    out: &mut [T],
    os: Shape,
) {
    let plane_x = xs.h * xs.w;
    let plane_o = os.h * os.w;
    let tap3 = is_tap3(ws, stride, pad, xs.w);
    for n in 0..xs.n {
        for co in 0..os.c {
            let obase = (n * os.c + co) * plane_o;
            for v in out[obase..obase + plane_o].iter_mut() {
                *v = b[co];
            }
            for ci in 0..xs.c {
                let xbase = (n * xs.c + ci) * plane_x;
                let wbase = (co * xs.c + ci) * ws.h * ws.w;
                if tap3 {
                    // Same-size case: one fused pass per kernel row covers
                    // all three column taps.
                    for kh in 0..3 {
                        let (oh_lo, oh_hi) = span(os.h, xs.h, 1, kh, 1);
                        let (a, bm, c) =
                            (w[wbase + kh * 3], w[wbase + kh * 3 + 1], w[wbase + kh * 3 + 2]);
                        for oh in oh_lo..oh_hi {
                            let ih = oh + kh - 1;
                            let xr = &x[xbase + ih * xs.w..xbase + (ih + 1) * xs.w];
                            let or = &mut out[obase + oh * os.w..obase + (oh + 1) * os.w];
                            row_tap3(or, xr, a, bm, c);
                        }
                    }
                    continue;
                }
                for kh in 0..ws.h {
                    let (oh_lo, oh_hi) = span(os.h, xs.h, stride, kh, pad);
                    for kw in 0..ws.w {
                        let wv = w[wbase + kh * ws.w + kw];
                        let (ow_lo, ow_hi) = span(os.w, xs.w, stride, kw, pad);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh * stride + kh - pad;
                            let xrow = xbase + ih * xs.w + kw - pad;
                            let orow = obase + oh * os.w;
                            if stride == 1 {
                                // Contiguous multiply-accumulate on both sides.
                                let xr = &x[xrow + ow_lo..xrow + ow_hi];
                                let or = &mut out[orow + ow_lo..orow + ow_hi];
                                for (ov, &xv) in or.iter_mut().zip(xr) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    out[orow + ow] += wv * x[xrow + ow * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_back_x<T: Scalar>(
    w: &[T],
    ws: Shape,
    gout: &[T],
    os: Shape,
    stride: usize,
    pad: usize,
    dx: &mut [T],
    xs: Shape,
) {
    let plane_x = xs.h * xs.w;
    let plane_o = os.h * os.w;
    let tap3 = is_tap3(ws, stride, pad, xs.w);
    for n in 0..xs.n {
        for co in 0..os.c {
            let obase = (n * os.c + co) * plane_o;
            for ci in 0..xs.c {
                let xbase = (n * xs.c + ci) * plane_x;
                let wbase = (co * xs.c + ci) * ws.h * ws.w;
                if tap3 {
                    // dx[t] += w2·g[t-1] + w1·g[t] + w0·g[t+1]: the fused
                    // pass with the column taps reversed.
                    for kh in 0..3 {
                        let (oh_lo, oh_hi) = span(os.h, xs.h, 1, kh, 1);
                        let (w0, w1, w2) =
                            (w[wbase + kh * 3], w[wbase + kh * 3 + 1], w[wbase + kh * 3 + 2]);
                        for oh in oh_lo..oh_hi {
                            let ih = oh + kh - 1;
                            let gr = &gout[obase + oh * os.w..obase + (oh + 1) * os.w];
                            let dr = &mut dx[xbase + ih * xs.w..xbase + (ih + 1) * xs.w];
                            row_tap3(dr, gr, w2, w1, w0);
                        }
                    }
                    continue;
                }
                for kh in 0..ws.h {
                    let (oh_lo, oh_hi) = span(os.h, xs.h, stride, kh, pad);
                    for kw in 0..ws.w {
                        let wv = w[wbase + kh * ws.w + kw];
                        let (ow_lo, ow_hi) = span(os.w, xs.w, stride, kw, pad);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh * stride + kh - pad;
                            let xrow = xbase + ih * xs.w + kw - pad;
                            let orow = obase + oh * os.w;
                            if stride == 1 {
                                let gr = &gout[orow + ow_lo..orow + ow_hi];
                                let dr = &mut dx[xrow + ow_lo..xrow + ow_hi];
                                for (dv, &gv) in dr.iter_mut().zip(gr) {
                                    *dv += wv * gv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    dx[xrow + ow * stride] += wv * gout[orow + ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_back_w<T: Scalar>(
    x: &[T],
    xs: Shape,
    gout: &[T],
    os: Shape,
    stride: usize,
    pad: usize,
    dw: &mut [T],
    ws: Shape,
) {
    let plane_x = xs.h * xs.w;
    let plane_o = os.h * os.w;
    let tap3 = is_tap3(ws, stride, pad, xs.w);
    for n in 0..xs.n {
        for co in 0..os.c {
            let obase = (n * os.c + co) * plane_o;
            for ci in 0..xs.c {
                let xbase = (n * xs.c + ci) * plane_x;
                let wbase = (co * xs.c + ci) * ws.h * ws.w;
                if tap3 {
                    // Per kernel row, the three column taps are dot products
                    // of the gout row against shifted x rows.
                    let wd = xs.w;
                    for kh in 0..3 {
                        let (oh_lo, oh_hi) = span(os.h, xs.h, 1, kh, 1);
                        let (mut a0, mut a1, mut a2) = (T::ZERO, T::ZERO, T::ZERO);
                        for oh in oh_lo..oh_hi {
                            let ih = oh + kh - 1;
                            let xr = &x[xbase + ih * wd..xbase + (ih + 1) * wd];
                            let gr = &gout[obase + oh * wd..obase + (oh + 1) * wd];
                            a0 += dot4(&xr[..wd - 1], &gr[1..]);
                            a1 += dot4(xr, gr);
                            a2 += dot4(&xr[1..], &gr[..wd - 1]);
                        }
                        dw[wbase + kh * 3] += a0;
                        dw[wbase + kh * 3 + 1] += a1;
                        dw[wbase + kh * 3 + 2] += a2;
                    }
                    continue;
                }
                for kh in 0..ws.h {
                    let (oh_lo, oh_hi) = span(os.h, xs.h, stride, kh, pad);
                    for kw in 0..ws.w {
                        let (ow_lo, ow_hi) = span(os.w, xs.w, stride, kw, pad);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let mut acc = T::ZERO;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * stride + kh - pad;
                            let xrow = xbase + ih * xs.w + kw - pad;
                            let orow = obase + oh * os.w;
                            if stride == 1 {
                                acc += dot4(
                                    &x[xrow + ow_lo..xrow + ow_hi],
                                    &gout[orow + ow_lo..orow + ow_hi],
                                );
                            } else {
                                for ow in ow_lo..ow_hi {
                                    acc += x[xrow + ow * stride] * gout[orow + ow];
                                }
                            }
                        }
                        dw[wbase + kh * ws.w + kw] += acc;
                    }
                }
            }
        }
    }
}

/// Transposed convolution: scatter each input element into a k×k output
/// patch. Weights are (C_in, C_out, k_h, k_w).
fn convt_fwd<T: Scalar>(
    x: &[T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    b: &[T],
    stride: usize,
    pad: usize,
    out: &mut [T],
    os: Shape,
) {
    let plane_x = xs.h * xs.w;
    let plane_o = os.h * os.w;
    for n in 0..xs.n {
        for co in 0..os.c {
            let obase = (n * os.c + co) * plane_o;
            for v in out[obase..obase + plane_o].iter_mut() {
                *v = b[co];
            }
            for ci in 0..xs.c {
                let xbase = (n * xs.c + ci) * plane_x;
                let wbase = (ci * ws.c + co) * ws.h * ws.w;
                for kh in 0..ws.h {
                    // oh = ih*stride + kh - pad must land in [0, os.h).
                    let (ih_lo, ih_hi) = span(xs.h, os.h, stride, kh, pad);
                    for kw in 0..ws.w {
                        let wv = w[wbase + kh * ws.w + kw];
                        let (iw_lo, iw_hi) = span(xs.w, os.w, stride, kw, pad);
                        for ih in ih_lo..ih_hi {
                            let oh = ih * stride + kh - pad;
                            let orow = obase + oh * os.w + kw - pad;
                            let xrow = xbase + ih * xs.w;
                            for iw in iw_lo..iw_hi {
                                out[orow + iw * stride] += wv * x[xrow + iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn convt_back_x<T: Scalar>(
    w: &[T],
    ws: Shape,
    gout: &[T],
    os: Shape,
    stride: usize,
    pad: usize,
    dx: &mut [T],
    xs: Shape,
) {
    let plane_x = xs.h * xs.w;
    let plane_o = os.h * os.w;
    for n in 0..xs.n {
        for co in 0..os.c {
            let obase = (n * os.c + co) * plane_o;
            for ci in 0..xs.c {
                let xbase = (n * xs.c + ci) * plane_x;
                let wbase = (ci * ws.c + co) * ws.h * ws.w;
                for kh in 0..ws.h {
                    let (ih_lo, ih_hi) = span(xs.h, os.h, stride, kh, pad);
                    for kw in 0..ws.w {
                        let wv = w[wbase + kh * ws.w + kw];
                        let (iw_lo, iw_hi) = span(xs.w, os.w, stride, kw, pad);
                        for ih in ih_lo..ih_hi {
                            let oh = ih * stride + kh - pad;
                            let orow = obase + oh * os.w + kw - pad;
                            let xrow = xbase + ih * xs.w;
                            for iw in iw_lo..iw_hi {
                                dx[xrow + iw] += wv * gout[orow + iw * stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn convt_back_w<T: Scalar>(
    x: &[T],
    xs: Shape,
    gout: &[T],
    os: Shape,
    stride: usize,
    pad: usize,
    dw: &mut [T],
    ws: Shape,
) {
    let plane_x = xs.h * xs.w;
    let plane_o = os.h * os.w;
    for n in 0..xs.n {
        for co in 0..os.c {
            let obase = (n * os.c + co) * plane_o;
            for ci in 0..xs.c {
                let xbase = (n * xs.c + ci) * plane_x;
                let wbase = (ci * ws.c + co) * ws.h * ws.w;
                for kh in 0..ws.h {
                    let (ih_lo, ih_hi) = span(xs.h, os.h, stride, kh, pad);
                    for kw in 0..ws.w {
                        let (iw_lo, iw_hi) = span(xs.w, os.w, stride, kw, pad);
                        let mut acc = T::ZERO;
                        for ih in ih_lo..ih_hi {
                            let oh = ih * stride + kh - pad;
                            let orow = obase + oh * os.w + kw - pad;
                            let xrow = xbase + ih * xs.w;
                            for iw in iw_lo..iw_hi {
                                acc += x[xrow + iw] * gout[orow + iw * stride];
                            }
                        }
                        dw[wbase + kh * ws.w + kw] += acc;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }

    #[test]
    fn conv_window_summation_golden() {
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.constant(Shape::nchw(1, 1, 3, 3), t(&[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let w = tape.constant(Shape::nchw(1, 1, 2, 2), t(&[1., 1., 1., 1.]));
        let b = tape.constant(Shape::nchw(1, 1, 1, 1), t(&[0.]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), Shape::nchw(1, 1, 2, 2));
        assert_eq!(tape.value(y), &[12., 16., 24., 28.]);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let data = t(&[0.5, -1.5, 2.0, 3.25]);
        let x = tape.constant(Shape::nchw(1, 1, 2, 2), data.clone());
        let w = tape.constant(Shape::nchw(1, 1, 1, 1), t(&[1.0]));
        let b = tape.constant(Shape::nchw(1, 1, 1, 1), t(&[0.0]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), data.as_slice());
    }

    #[test]
    fn strided_conv_shape_halves_input() {
        let mut tape: Tape<f32> = Tape::new(Mode::Eval);
        let x = tape.constant(Shape::nchw(1, 1, 128, 256), vec![0.0; 128 * 256]);
        let w = tape.constant(Shape::nchw(3, 1, 4, 4), vec![0.0; 48]);
        let b = tape.constant(Shape::nchw(3, 1, 1, 1), vec![0.0; 3]);
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), Shape::nchw(1, 3, 64, 128));
    }

    #[test]
    fn conv_is_linear_in_its_input() {
        let mut rng = DetRng::seeded(31);
        let xs = Shape::nchw(1, 2, 5, 6);
        let a: Vec<f64> = (0..xs.count()).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        let bb: Vec<f64> = (0..xs.count()).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        let wdata: Vec<f64> = (0..2 * 2 * 9).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        let run = |data: Vec<f64>| -> Vec<f64> {
            let mut tape: Tape<f64> = Tape::new(Mode::Eval);
            let x = tape.constant(xs, data);
            let w = tape.constant(Shape::nchw(2, 2, 3, 3), wdata.clone());
            let b = tape.constant(Shape::nchw(2, 1, 1, 1), vec![0.0; 2]);
            let y = tape.conv2d(x, w, b, 1, 1).unwrap();
            tape.value(y).to_vec()
        };
        let (alpha, beta) = (0.7, -1.3);
        let mixed: Vec<f64> =
            a.iter().zip(&bb).map(|(&p, &q)| alpha * p + beta * q).collect();
        let lhs = run(mixed);
        let (ya, yb) = (run(a), run(bb));
        for i in 0..lhs.len() {
            let rhs = alpha * ya[i] + beta * yb[i];
            assert!((lhs[i] - rhs).abs() <= 1.0e-5 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn transposed_conv_shape_and_guard() {
        let mut tape: Tape<f32> = Tape::new(Mode::Eval);
        let x = tape.constant(Shape::nchw(1, 1, 64, 64), vec![0.0; 64 * 64]);
        let w = tape.constant(Shape::nchw(1, 1, 4, 4), vec![0.0; 16]);
        let b = tape.constant(Shape::nchw(1, 1, 1, 1), vec![0.0]);
        let y = tape.conv_transpose2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y).h, 128);
        let w3 = tape.constant(Shape::nchw(1, 1, 3, 3), vec![0.0; 9]);
        match tape.conv_transpose2d(x, w3, b, 2, 1) {
            Err(TensorError::CheckerboardRisk { kernel: 3, stride: 2 }) => {}
            other => panic!("expected checkerboard guard, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn conv_and_transpose_are_adjoint() {
        // <conv(x,w), y> must equal <x, convT(y,w)> with zero biases.
        let mut rng = DetRng::seeded(97);
        for &(stride, k, h, w) in &[(1usize, 3usize, 5usize, 7usize), (2, 4, 6, 8), (2, 2, 4, 6)] {
            let xs = Shape::nchw(1, 2, h, w);
            let xv: Vec<f64> = (0..xs.count()).map(|_| rng.range_f64(-1.0, 1.0)).collect();
            let wv: Vec<f64> = (0..3 * 2 * k * k).map(|_| rng.range_f64(-1.0, 1.0)).collect();
            let mut tape: Tape<f64> = Tape::new(Mode::Eval);
            let x = tape.constant(xs, xv.clone());
            let wc = tape.constant(Shape::nchw(3, 2, k, k), wv.clone());
            let bc = tape.constant(Shape::nchw(3, 1, 1, 1), vec![0.0; 3]);
            let cx = tape.conv2d(x, wc, bc, stride, 0).unwrap();
            let cs = tape.shape(cx);
            let yv: Vec<f64> = (0..cs.count()).map(|_| rng.range_f64(-1.0, 1.0)).collect();
            let y = tape.constant(cs, yv.clone());
            // convT weights indexed (C_in=3, C_out=2).
            let mut wt = vec![0.0; wv.len()];
            for co in 0..3 {
                for ci in 0..2 {
                    for i in 0..k * k {
                        wt[(co * 2 + ci) * k * k + i] = wv[(co * 2 + ci) * k * k + i];
                    }
                }
            }
            let wtc = tape.constant(Shape::nchw(3, 2, k, k), wt);
            let bt = tape.constant(Shape::nchw(2, 1, 1, 1), vec![0.0; 2]);
            let ty = tape.conv_transpose2d(y, wtc, bt, stride, 0).unwrap();
            assert_eq!(tape.shape(ty), xs);
            let lhs: f64 = tape.value(cx).iter().zip(&yv).map(|(&a, &b)| a * b).sum();
            let rhs: f64 = tape.value(ty).iter().zip(&xv).map(|(&a, &b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1.0e-9 * lhs.abs().max(1.0), "stride {}", stride);
        }
    }

    #[test]
    fn batch_norm_centers_constant_input_to_zero() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let rm = store.register("rm", Shape::nchw(2, 1, 1, 1), vec![0.0; 2], false);
        let rv = store.register("rv", Shape::nchw(2, 1, 1, 1), vec![1.0; 2], false);
        let mut tape: Tape<f64> = Tape::new(Mode::Train { seed: 1 });
        let x = tape.constant(Shape::nchw(2, 2, 3, 3), vec![7.5; 36]);
        let g = tape.constant(Shape::nchw(2, 1, 1, 1), vec![1.0; 2]);
        let s = tape.constant(Shape::nchw(2, 1, 1, 1), vec![0.0; 2]);
        let y = tape.batch_norm(x, g, s, &store, rm, rv, 0.1, 1.0e-5).unwrap();
        for &v in tape.value(y) {
            assert!(v.abs() < 1.0e-5);
        }
    }

    #[test]
    fn batch_norm_train_statistics_are_unit() {
        let mut rng = DetRng::seeded(5);
        let xs = Shape::nchw(2, 3, 4, 5);
        let data: Vec<f64> = (0..xs.count()).map(|_| rng.range_f64(-2.0, 3.0)).collect();
        let mut store: ParamStore<f64> = ParamStore::new();
        let rm = store.register("rm", Shape::nchw(3, 1, 1, 1), vec![0.0; 3], false);
        let rv = store.register("rv", Shape::nchw(3, 1, 1, 1), vec![1.0; 3], false);
        let mut tape: Tape<f64> = Tape::new(Mode::Train { seed: 1 });
        let x = tape.constant(xs, data);
        let g = tape.constant(Shape::nchw(3, 1, 1, 1), vec![1.0; 3]);
        let s = tape.constant(Shape::nchw(3, 1, 1, 1), vec![0.0; 3]);
        let y = tape.batch_norm(x, g, s, &store, rm, rv, 0.1, 1.0e-9).unwrap();
        let yv = tape.value(y);
        let m = (xs.n * xs.h * xs.w) as f64;
        for ch in 0..3 {
            let mut mean = 0.0;
            let mut var = 0.0;
            for n in 0..xs.n {
                let base = (n * 3 + ch) * 20;
                for i in 0..20 {
                    mean += yv[base + i];
                }
            }
            mean /= m;
            for n in 0..xs.n {
                let base = (n * 3 + ch) * 20;
                for i in 0..20 {
                    var += (yv[base + i] - mean) * (yv[base + i] - mean);
                }
            }
            var /= m;
            assert!(mean.abs() < 1.0e-5, "mean {}", mean);
            assert!((var - 1.0).abs() < 1.0e-3, "var {}", var);
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_statistics() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let rm = store.register("rm", Shape::nchw(1, 1, 1, 1), vec![2.0], false);
        let rv = store.register("rv", Shape::nchw(1, 1, 1, 1), vec![4.0], false);
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.constant(Shape::nchw(1, 1, 1, 1), vec![4.0]);
        let g = tape.constant(Shape::nchw(1, 1, 1, 1), vec![1.0]);
        let s = tape.constant(Shape::nchw(1, 1, 1, 1), vec![0.0]);
        let y = tape.batch_norm(x, g, s, &store, rm, rv, 0.1, 0.0).unwrap();
        assert_eq!(tape.value(y), &[1.0]);
    }

    #[test]
    fn activation_fixed_points() {
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.constant(Shape::nchw(1, 1, 1, 3), t(&[-3.0, -1.0, 0.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r), &[0.0, 0.0, 0.0]);
        let l = tape.leaky_relu(x);
        assert!((tape.value(l)[1] - (-0.2)).abs() < 1.0e-12);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s)[2], 0.5);
    }

    #[test]
    fn max_pool_takes_window_maxima() {
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.constant(Shape::nchw(1, 1, 2, 2), t(&[1., 2., 3., 4.]));
        let y = tape.max_pool_2x2(x).unwrap();
        assert_eq!(tape.value(y), &[4.0]);
        let odd = tape.constant(Shape::nchw(1, 1, 3, 2), vec![0.0; 6]);
        assert!(tape.max_pool_2x2(odd).is_err());
    }

    #[test]
    fn bilinear_upsample_weights() {
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.constant(Shape::nchw(1, 1, 2, 2), t(&[0., 1., 0., 1.]));
        let y = tape.bilinear_up_2x(x);
        let v = tape.value(y);
        for row in 0..4 {
            let r = &v[row * 4..row * 4 + 4];
            assert!((r[0] - 0.0).abs() < 1e-12);
            assert!((r[1] - 0.25).abs() < 1e-12);
            assert!((r[2] - 0.75).abs() < 1e-12);
            assert!((r[3] - 1.0).abs() < 1e-12);
        }
        let c = tape.constant(Shape::nchw(1, 1, 3, 3), vec![5.0; 9]);
        let cy = tape.bilinear_up_2x(c);
        assert!(tape.value(cy).iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn reductions_match_hand_arithmetic() {
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.constant(Shape::nchw(1, 1, 2, 2), t(&[1., 3., 5., 7.]));
        let g = tape.gap_spatial(x);
        assert_eq!(tape.value(g), &[4.0]);
        let m = tape.gmp_spatial(x);
        assert_eq!(tape.value(m), &[7.0]);
        let two = tape.constant(Shape::nchw(1, 2, 2, 2), t(&[2., 2., 2., 2., 6., 6., 6., 6.]));
        let a = tape.avg_over_channels(two);
        assert_eq!(tape.shape(a), Shape::nchw(1, 1, 2, 2));
        assert!(tape.value(a).iter().all(|&v| v == 4.0));
        let mx = tape.max_over_channels(two);
        assert!(tape.value(mx).iter().all(|&v| v == 6.0));
    }

    #[test]
    fn combine_contracts() {
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let a = tape.constant(Shape::nchw(1, 3, 2, 2), vec![1.0; 12]);
        let b = tape.constant(Shape::nchw(1, 5, 2, 2), vec![2.0; 20]);
        let cat = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(cat).c, 8);
        let gate = tape.constant(Shape::nchw(1, 2, 1, 1), t(&[0.5, 2.0]));
        let x2 = tape.constant(Shape::nchw(1, 2, 2, 2), vec![1.0; 8]);
        let gated = tape.mul_broadcast(x2, gate).unwrap();
        assert_eq!(tape.value(gated), &[0.5, 0.5, 0.5, 0.5, 2.0, 2.0, 2.0, 2.0]);
        let ones = tape.constant(Shape::nchw(1, 2, 2, 2), vec![1.0; 8]);
        let same = tape.mul_broadcast(x2, ones).unwrap();
        assert_eq!(tape.value(same), tape.value(x2));
    }

    #[test]
    fn dense_affine_golden() {
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.constant(Shape::nchw(1, 2, 1, 1), t(&[2.0, 3.0]));
        let w = tape.constant(Shape::nchw(1, 2, 1, 1), t(&[1.0, 1.0]));
        let b = tape.constant(Shape::nchw(1, 1, 1, 1), t(&[1.0]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[6.0]);
        let wz = tape.constant(Shape::nchw(1, 2, 1, 1), t(&[0.0, 0.0]));
        let yz = tape.dense(x, wz, b).unwrap();
        assert_eq!(tape.value(yz), &[1.0]);
    }

    #[test]
    fn dropout_surviving_fraction_near_keep_rate() {
        let mut tape: Tape<f64> = Tape::new(Mode::Train { seed: 42 });
        let n = 40_000;
        let x = tape.constant(Shape::nchw(1, 1, 200, 200), vec![1.0; n]);
        let y = tape.dropout(x, 0.5);
        let kept = tape.value(y).iter().filter(|&&v| v != 0.0).count();
        let frac = kept as f64 / n as f64;
        assert!((0.48..=0.52).contains(&frac), "kept {}", frac);
        // Survivors carry the 1/(1-rate) scale.
        assert!(tape.value(y).iter().all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-12));
        let mut eval_tape: Tape<f64> = Tape::new(Mode::Eval);
        let xe = eval_tape.constant(Shape::nchw(1, 1, 2, 2), t(&[1., 2., 3., 4.]));
        assert_eq!(eval_tape.dropout(xe, 0.5), xe);
        assert_eq!(tape.dropout(x, 0.0), x);
    }

    #[test]
    fn l1_loss_single_pixel_and_offset() {
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let p = tape.constant(Shape::nchw(1, 2, 1, 1), t(&[0.2, 0.4]));
        let z = tape.constant(Shape::nchw(1, 2, 1, 1), t(&[0.0, 0.0]));
        let l = tape.l1_loss(p, z).unwrap();
        assert!((tape.value(l)[0] - 0.3).abs() < 1e-15);
        let a = tape.constant(Shape::nchw(2, 1, 3, 4), vec![1.5; 24]);
        let b = tape.constant(Shape::nchw(2, 1, 3, 4), vec![1.0; 24]);
        let l2 = tape.l1_loss(a, b).unwrap();
        assert!((tape.value(l2)[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_relu_sum_gradient_is_one_in_linear_region() {
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.variable(Shape::nchw(1, 1, 1, 1), t(&[2.0]));
        let r = tape.relu(x);
        let z = tape.constant(Shape::nchw(1, 1, 1, 1), t(&[0.0]));
        // Loss = |relu(x) - 0| / 2, so d/dx = 1/2; scale by 2 via add.
        let l = tape.l1_loss(r, z).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.5]);
    }

    #[test]
    fn backward_of_detached_loss_leaves_all_grads_empty() {
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.constant(Shape::nchw(1, 1, 1, 1), t(&[2.0]));
        let y = tape.relu(x);
        let z = tape.constant(Shape::nchw(1, 1, 1, 1), t(&[0.0]));
        let l = tape.l1_loss(y, z).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(x).is_none());
        assert!(tape.grad(l).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let x = tape.variable(Shape::nchw(1, 1, 2, 2), vec![1.0; 4]);
        let y = tape.relu(x);
        match tape.backward(y) {
            Err(TensorError::NotScalar { count: 4 }) => {}
            other => panic!("expected NotScalar, got {:?}", other),
        }
    }

    #[test]
    fn shared_parameter_accumulates_both_uses() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let wix = store.register("w", Shape::nchw(1, 1, 1, 1), vec![3.0], true);
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let w1 = tape.param(&store, wix);
        let w2 = tape.param(&store, wix);
        assert_eq!(w1, w2);
        let x = tape.constant(Shape::nchw(1, 1, 1, 1), vec![1.0]);
        let b = tape.constant(Shape::nchw(1, 1, 1, 1), vec![0.0]);
        let y1 = tape.dense(x, w1, b).unwrap();
        let y2 = tape.dense(y1, w2, b).unwrap(); // y = w^2 * x = 9
        assert_eq!(tape.value(y2), &[9.0]);
        let z = tape.constant(Shape::nchw(1, 1, 1, 1), vec![0.0]);
        let l = tape.l1_loss(y2, z).unwrap();
        tape.backward(l).unwrap();
        // d(w^2/2)/dw = w = 3.
        assert!((tape.grad(w1).unwrap()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn train_mode_updates_running_statistics() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let rm = store.register("rm", Shape::nchw(1, 1, 1, 1), vec![0.0], false);
        let rv = store.register("rv", Shape::nchw(1, 1, 1, 1), vec![1.0], false);
        let mut tape: Tape<f64> = Tape::new(Mode::Train { seed: 0 });
        let x = tape.constant(Shape::nchw(1, 1, 1, 4), t(&[1.0, 2.0, 3.0, 4.0]));
        let g = tape.constant(Shape::nchw(1, 1, 1, 1), vec![1.0]);
        let s = tape.constant(Shape::nchw(1, 1, 1, 1), vec![0.0]);
        tape.batch_norm(x, g, s, &store, rm, rv, 0.1, 1e-5).unwrap();
        let ups = tape.take_stat_updates();
        assert_eq!(ups.len(), 2);
        // mean 2.5; biased var 1.25, unbiased 5/3.
        assert!((ups[0].1[0] - 0.25).abs() < 1e-12);
        assert!((ups[1].1[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }
}
