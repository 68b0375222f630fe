//! Wengert tape. Nodes are appended in execution order, so a node's inputs
//! always have smaller indices and reverse index order is a reverse
//! topological order.
//!
//! Adjoints are expressed with the same recorded operations as the forward
//! pass. With `create_graph` the adjoint nodes themselves require gradients,
//! which is what the gradient penalty needs.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::error::{dim_err, Result, TensorError};
use crate::kernels::{self, NormStats};
use crate::param::{Gradients, ParamId, ParamStore};
use crate::{Float, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation.
pub trait CustomOp<T: Float>: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    /// Vector-Jacobian product: one entry per input, `None` for no gradient.
    fn vjp(
        &self,
        tape: &mut Tape<T>,
        inputs: &[Var],
        output: Var,
        grad: Var,
    ) -> Result<Vec<Option<Var>>>;
}

#[derive(Clone)]
enum Op<T: Float> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Abs(Var),
    Clamp(Var, T, T),
    Log(Var),
    Recip(Var),
    Sqrt(Var),
    RecipOrZero(Var),
    SumAll(Var),
    ExpandScalar(Var),
    SumPerSample(Var),
    ExpandPerSample(Var),
    Reshape(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    AddRowBias(Var, Var),
    SumRows(Var),
    ExpandRows(Var),
    AddChannelBias(Var, Var),
    SumChannels(Var),
    ExpandChannels(Var),
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvT { x: Var, w: Var, stride: usize, pad: usize },
    ConvWGrad { x: Var, dy: Var, stride: usize, pad: usize },
    InstanceNorm { x: Var, scale: Var, shift: Var, stats: Arc<NormStats<T>> },
    Custom(Arc<dyn CustomOp<T>>, Vec<Var>),
}

impl<T: Float> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Abs(_) => "abs",
            Op::Clamp(..) => "clamp",
            Op::Log(_) => "log",
            Op::Recip(_) => "recip",
            Op::Sqrt(_) => "sqrt",
            Op::RecipOrZero(_) => "recip_or_zero",
            Op::SumAll(_) => "sum",
            Op::ExpandScalar(_) => "expand_scalar",
            Op::SumPerSample(_) => "sum_per_sample",
            Op::ExpandPerSample(_) => "expand_per_sample",
            Op::Reshape(_) => "reshape",
            Op::MatMul { .. } => "matmul",
            Op::AddRowBias(..) => "add_row_bias",
            Op::SumRows(_) => "sum_rows",
            Op::ExpandRows(_) => "expand_rows",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::SumChannels(_) => "sum_channels",
            Op::ExpandChannels(_) => "expand_channels",
            Op::Concat(..) => "concat_channels",
            Op::Slice { .. } => "slice_channels",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvT { .. } => "conv_transpose2d",
            Op::ConvWGrad { .. } => "conv2d_weight_grad",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Custom(op, _) => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBias(a, b)
            | Op::AddChannelBias(a, b)
            | Op::Concat(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Affine(a, ..)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Abs(a)
            | Op::Clamp(a, ..)
            | Op::Log(a)
            | Op::Recip(a)
            | Op::Sqrt(a)
            | Op::RecipOrZero(a)
            | Op::SumAll(a)
            | Op::ExpandScalar(a)
            | Op::SumPerSample(a)
            | Op::ExpandPerSample(a)
            | Op::Reshape(a)
            | Op::SumRows(a)
            | Op::ExpandRows(a)
            | Op::SumChannels(a)
            | Op::ExpandChannels(a) => vec![*a],
            Op::Slice { x, .. } => vec![*x],
            Op::Conv2d { x, w, .. } | Op::ConvT { x, w, .. } => vec![*x, *w],
            Op::ConvWGrad { x, dy, .. } => vec![*x, *dy],
            Op::InstanceNorm { x, scale, shift, .. } => vec![*x, *scale, *shift],
            Op::Custom(_, inputs) => inputs.clone(),
        }
    }
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records tensor operations for reverse-mode differentiation.
pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    frozen: HashSet<u64>,
    bindings: HashMap<(u64, usize), Var>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            frozen: HashSet::new(),
            bindings: HashMap::new(),
        }
    }

    /// A tape that records values only; nothing on it requires gradients.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad =
            self.grad_enabled && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input leaf; `requires_grad` leaves can be differentiated against with [`Tape::grad`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push_leaf(value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(value, false)
    }

    /// Parameters of `store` bound after this call do not require gradients.
    pub fn freeze(&mut self, store: &ParamStore<T>) {
        self.frozen.insert(store.uid());
    }

    /// Binds a parameter as a leaf. Repeated calls on one tape return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.bindings.get(&key) {
            return Ok(v);
        }
        let rg = !self.frozen.contains(&store.uid());
        let v = self.push_leaf(store.get(id).value.clone(), rg)?;
        self.bindings.insert(key, v);
        Ok(v)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let out = x.zip_map(y, |p, q| p + q)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let out = x.zip_map(y, |p, q| p - q)?;
        self.push(out, Op::Sub(a, b))
    }

    /// Entry-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let out = x.zip_map(y, |p, q| p * q)?;
        self.push(out, Op::Mul(a, b))
    }

    /// `a * scale + offset` with scalar constants.
    pub fn affine(&mut self, a: Var, scale: T, offset: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * scale + offset);
        self.push(out, Op::Affine(a, scale, offset))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        self.affine(a, k, T::zero())
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -T::one(), T::zero())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.affine(a, T::one(), c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.tanh());
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: T) -> Result<Var> {
        let out = self
            .value(a)
            .map(|v| if v > T::zero() { v } else { v * alpha });
        self.push(out, Op::LeakyRelu(a, alpha))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.abs());
        self.push(out, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.ln());
        self.push(out, Op::Log(a))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| T::one() / v);
        self.push(out, Op::Recip(a))
    }

    /// Square root whose derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.sqrt());
        self.push(out, Op::Sqrt(a))
    }

    fn recip_or_zero(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .map(|v| if v == T::zero() { T::zero() } else { T::one() / v });
        self.push(out, Op::RecipOrZero(a))
    }

    // ---- reductions and broadcasts ----

    /// Sum of all elements as a scalar (shape `[]`).
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    fn expand_scalar(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(s).item()?;
        self.push(Tensor::full(shape, v), Op::ExpandScalar(s))
    }

    /// (n, ...) -> (n): sum over everything but the batch axis.
    pub fn sum_per_sample(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let Some(&n) = t.shape().first() else {
            return dim_err("sum_per_sample", "scalar has no batch axis");
        };
        let per = t.numel() / n.max(1);
        let out: Vec<T> = t.data().chunks(per.max(1)).map(|c| c.iter().copied().sum()).collect();
        let out = Tensor::new(&[n], out)?;
        self.push(out, Op::SumPerSample(a))
    }

    /// (n) -> `shape` with leading dimension n, constant within each sample.
    pub fn expand_per_sample(&mut self, v: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(v);
        if t.ndim() != 1 || shape.first() != Some(&t.shape()[0]) {
            return dim_err(
                "expand_per_sample",
                format!("{:?} into {shape:?}", t.shape()),
            );
        }
        let per: usize = shape[1..].iter().product();
        let data: Vec<T> = t.data().iter().flat_map(|&x| std::iter::repeat_n(x, per)).collect();
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::ExpandPerSample(v))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a))
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let Some(&n) = s.first() else {
            return dim_err("flatten", "scalar has no batch axis");
        };
        let f = s[1..].iter().product();
        self.reshape(a, &[n, f])
    }

    // ---- dense layers ----

    /// `op(a) * op(b)` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (&[r0, c0], &[r1, c1]) = (x.shape(), y.shape()) else {
            return dim_err("matmul", format!("2-D operands required, got {:?} and {:?}", x.shape(), y.shape()));
        };
        let (m, k) = if ta { (c0, r0) } else { (r0, c0) };
        let (k2, n) = if tb { (c1, r1) } else { (r1, c1) };
        if k != k2 {
            return dim_err("matmul", format!("inner dimensions {k} and {k2} differ"));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(ta, tb, m, n, k, T::one(), x.data(), y.data(), T::zero(), &mut out);
        let out = Tensor::new(&[m, n], out)?;
        self.push(out, Op::MatMul { a, b, ta, tb })
    }

    /// `x (n, f) + b (f)` row-wise.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (t, bias) = (self.value(x), self.value(b));
        let (&[_, f], &[fb]) = (t.shape(), bias.shape()) else {
            return dim_err("add_row_bias", format!("{:?} + {:?}", t.shape(), bias.shape()));
        };
        if f != fb {
            return dim_err("add_row_bias", format!("{f} features vs bias {fb}"));
        }
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(f) {
            for (o, &bv) in row.iter_mut().zip(bias.data()) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRowBias(x, b))
    }

    fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let &[_, f] = t.shape() else {
            return dim_err("sum_rows", format!("2-D input required, got {:?}", t.shape()));
        };
        let mut out = vec![T::zero(); f];
        for row in t.data().chunks(f) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let out = Tensor::new(&[f], out)?;
        self.push(out, Op::SumRows(x))
    }

    fn expand_rows(&mut self, b: Var, n: usize) -> Result<Var> {
        let t = self.value(b);
        let f = t.numel();
        let data: Vec<T> = (0..n).flat_map(|_| t.data().iter().copied()).collect();
        let out = Tensor::new(&[n, f], data)?;
        self.push(out, Op::ExpandRows(b))
    }

    /// Affine map `x w^T + b` with `w` shaped (out, in).
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return dim_err(
                "fully_connected",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            );
        }
        let y = self.matmul(x, w, false, true)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    // ---- channel-wise ----

    /// `x (n, c, h, w) + b (c)`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (t, bias) = (self.value(x), self.value(b));
        let (_, c, h, w) = t.dims4()?;
        if bias.shape() != [c] {
            return dim_err("add_channel_bias", format!("bias {:?} for {c} channels", bias.shape()));
        }
        let mut out = t.clone();
        for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let bv = bias.data()[i % c];
            plane.iter_mut().for_each(|v| *v += bv);
        }
        self.push(out, Op::AddChannelBias(x, b))
    }

    fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, c, h, w) = t.dims4()?;
        let mut out = vec![T::zero(); c];
        for (i, plane) in t.data().chunks(h * w).enumerate() {
            out[i % c] += plane.iter().copied().sum::<T>();
        }
        let out = Tensor::new(&[c], out)?;
        self.push(out, Op::SumChannels(x))
    }

    fn expand_channels(&mut self, b: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(b);
        let &[_, c, h, w] = shape else {
            return dim_err("expand_channels", format!("target {shape:?} is not 4-D"));
        };
        if t.shape() != [c] {
            return dim_err("expand_channels", format!("{:?} into {shape:?}", t.shape()));
        }
        let mut out = Tensor::zeros(shape);
        for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            plane.fill(t.data()[i % c]);
        }
        self.push(out, Op::ExpandChannels(b))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (n, ca, h, w) = x.dims4()?;
        let (nb, cb, hb, wb) = y.dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return dim_err(
                "concat_channels",
                format!("{:?} and {:?} differ outside the channel axis", x.shape(), y.shape()),
            );
        }
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (sa + sb));
        for i in 0..n {
            out.extend_from_slice(&x.data()[i * sa..(i + 1) * sa]);
            out.extend_from_slice(&y.data()[i * sb..(i + 1) * sb]);
        }
        let out = Tensor::new(&[n, ca + cb, h, w], out)?;
        self.push(out, Op::Concat(a, b))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4()?;
        if start + len > c {
            return dim_err("slice_channels", format!("{start}..{} of {c} channels", start + len));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            out.extend_from_slice(&t.data()[(i * c + start) * hw..(i * c + start + len) * hw]);
        }
        let out = Tensor::new(&[n, len, h, w], out)?;
        self.push(out, Op::Slice { x, start })
    }

    // ---- convolutions ----

    /// 2-D cross-correlation, weight (out, in, k, k), optional bias (out).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), stride, pad)?;
        let y = self.push(out, Op::Conv2d { x, w, stride, pad })?;
        match b {
            Some(b) => self.add_channel_bias(y, b),
            None => Ok(y),
        }
    }

    /// Transposed convolution with weight (in, out, k, k) and optional bias (out).
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv_transpose2d(self.value(x), self.value(w), stride, pad, None)?;
        let y = self.push(out, Op::ConvT { x, w, stride, pad })?;
        match b {
            Some(b) => self.add_channel_bias(y, b),
            None => Ok(y),
        }
    }

    /// Transposed convolution with an explicit output size.
    pub fn conv_transpose2d_sized(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let out = kernels::conv_transpose2d(self.value(x), self.value(w), stride, pad, Some(out_hw))?;
        self.push(out, Op::ConvT { x, w, stride, pad })
    }

    /// Weight gradient of a `k x k` convolution of `x` producing `dy`.
    pub fn conv2d_weight_grad(&mut self, x: Var, dy: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d_weight_grad(self.value(x), self.value(dy), k, stride, pad)?;
        self.push(out, Op::ConvWGrad { x, dy, stride, pad })
    }

    /// Per-(sample, channel) normalization followed by a channel affine map.
    pub fn instance_norm(&mut self, x: Var, scale: Var, shift: Var, eps: T) -> Result<Var> {
        let (out, stats) =
            kernels::instance_norm(self.value(x), self.value(scale), self.value(shift), eps)?;
        self.push(
            out,
            Op::InstanceNorm {
                x,
                scale,
                shift,
                stats: Arc::new(stats),
            },
        )
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&values)?;
        self.push(out, Op::Custom(op, inputs.to_vec()))
    }

    // ---- differentiation ----

    fn check_root(&self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        Ok(())
    }

    /// Reverse sweep from `root`. `relevant[i]` marks nodes whose adjoint is
    /// wanted; returns the adjoint of every node up to `root`.
    fn sweep(&mut self, root: Var, relevant: &[bool], create_graph: bool) -> Result<Vec<Option<Var>>> {
        self.check_root(root)?;
        let saved_mode = self.grad_enabled;
        self.grad_enabled = create_graph && saved_mode;
        let result = self.sweep_inner(root, relevant);
        self.grad_enabled = saved_mode;
        result
    }

    fn sweep_inner(&mut self, root: Var, relevant: &[bool]) -> Result<Vec<Option<Var>>> {
        let n = root.0 + 1;
        let mut adj: Vec<Option<Var>> = vec![None; n];
        if !relevant[root.0] {
            return Ok(adj);
        }
        let seed = Tensor::full(self.shape(root), T::one());
        adj[root.0] = Some(self.constant(seed)?);
        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let inputs = self.nodes[i].op.inputs();
            let need: Vec<bool> = inputs.iter().map(|v| relevant[v.0]).collect();
            if !need.iter().any(|&b| b) {
                continue;
            }
            let contribs = self.vjp(Var(i), g, &need)?;
            for ((input, grad), needed) in inputs.iter().zip(contribs).zip(need) {
                let (Some(grad), true) = (grad, needed) else { continue };
                adj[input.0] = Some(match adj[input.0] {
                    Some(prev) => self.add(prev, grad)?,
                    None => grad,
                });
            }
        }
        Ok(adj)
    }

    /// Gradients of scalar `root` with respect to `wrt`, as nodes on this tape.
    /// With `create_graph` the results can be differentiated again.
    pub fn grad(&mut self, root: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Option<Var>>> {
        self.check_root(root)?;
        let n = root.0 + 1;
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.0 < n && self.nodes[w.0].requires_grad {
                relevant[w.0] = true;
            }
        }
        for i in 0..n {
            if !relevant[i] && self.nodes[i].requires_grad {
                relevant[i] = self.nodes[i].op.inputs().iter().any(|v| relevant[v.0]);
            }
        }
        let adj = self.sweep(root, &relevant, create_graph)?;
        Ok(wrt
            .iter()
            .map(|w| adj.get(w.0).copied().flatten())
            .collect())
    }

    /// First-order gradients of scalar `root` for every bound, unfrozen parameter.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        self.check_root(root)?;
        let n = root.0 + 1;
        let relevant: Vec<bool> = self.nodes[..n].iter().map(|nd| nd.requires_grad).collect();
        let adj = self.sweep(root, &relevant, false)?;
        let mut grads = Gradients::default();
        for (&key, &v) in &self.bindings {
            if v.0 >= n {
                continue;
            }
            if let Some(g) = adj[v.0] {
                let t = self.value(g);
                if !t.is_finite() {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
                grads.map.insert(key, t.clone());
            }
        }
        Ok(grads)
    }

    fn mask(&mut self, x: Var, f: impl Fn(T) -> T) -> Result<Var> {
        let m = self.value(x).map(f);
        self.constant(m)
    }

    fn vjp(&mut self, out: Var, g: Var, need: &[bool]) -> Result<Vec<Option<Var>>> {
        let op = self.nodes[out.0].op.clone();
        let one = T::one();
        let zero = T::zero();
        let grads = match op {
            Op::Leaf => vec![],
            Op::Add(..) => vec![Some(g), Some(g)],
            Op::Sub(..) => {
                let nb = if need[1] { Some(self.neg(g)?) } else { None };
                vec![Some(g), nb]
            }
            Op::Mul(a, b) => {
                let ga = if need[0] { Some(self.mul(g, b)?) } else { None };
                let gb = if need[1] { Some(self.mul(g, a)?) } else { None };
                vec![ga, gb]
            }
            Op::Affine(_, k, _) => vec![Some(self.scale(g, k)?)],
            Op::Sigmoid(_) => {
                let om = self.affine(out, -one, one)?;
                let d = self.mul(out, om)?;
                vec![Some(self.mul(g, d)?)]
            }
            Op::Tanh(_) => {
                let sq = self.mul(out, out)?;
                let d = self.affine(sq, -one, one)?;
                vec![Some(self.mul(g, d)?)]
            }
            Op::Relu(a) => {
                let m = self.mask(a, |v| if v > zero { one } else { zero })?;
                vec![Some(self.mul(g, m)?)]
            }
            Op::LeakyRelu(a, alpha) => {
                let m = self.mask(a, |v| if v > zero { one } else { alpha })?;
                vec![Some(self.mul(g, m)?)]
            }
            Op::Abs(a) => {
                let m = self.mask(a, |v| {
                    if v > zero {
                        one
                    } else if v < zero {
                        -one
                    } else {
                        zero
                    }
                })?;
                vec![Some(self.mul(g, m)?)]
            }
            Op::Clamp(a, lo, hi) => {
                let m = self.mask(a, |v| if v >= lo && v <= hi { one } else { zero })?;
                vec![Some(self.mul(g, m)?)]
            }
            Op::Log(a) => {
                let r = self.recip(a)?;
                vec![Some(self.mul(g, r)?)]
            }
            Op::Recip(_) => {
                let sq = self.mul(out, out)?;
                let d = self.neg(sq)?;
                vec![Some(self.mul(g, d)?)]
            }
            Op::Sqrt(_) => {
                let r = self.recip_or_zero(out)?;
                let d = self.scale(r, T::of(0.5))?;
                vec![Some(self.mul(g, d)?)]
            }
            Op::RecipOrZero(_) => {
                let sq = self.mul(out, out)?;
                let d = self.neg(sq)?;
                vec![Some(self.mul(g, d)?)]
            }
            Op::SumAll(a) => {
                let shape = self.shape(a).to_vec();
                vec![Some(self.expand_scalar(g, &shape)?)]
            }
            Op::ExpandScalar(_) => vec![Some(self.sum(g)?)],
            Op::SumPerSample(a) => {
                let shape = self.shape(a).to_vec();
                vec![Some(self.expand_per_sample(g, &shape)?)]
            }
            Op::ExpandPerSample(_) => vec![Some(self.sum_per_sample(g)?)],
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                vec![Some(self.reshape(g, &shape)?)]
            }
            Op::MatMul { a, b, ta, tb } => {
                let ga = if !need[0] {
                    None
                } else if ta {
                    Some(self.matmul(b, g, tb, true)?)
                } else {
                    Some(self.matmul(g, b, false, !tb)?)
                };
                let gb = if !need[1] {
                    None
                } else if tb {
                    Some(self.matmul(g, a, true, ta)?)
                } else {
                    Some(self.matmul(a, g, !ta, false)?)
                };
                vec![ga, gb]
            }
            Op::AddRowBias(..) => {
                let gb = if need[1] { Some(self.sum_rows(g)?) } else { None };
                vec![Some(g), gb]
            }
            Op::SumRows(x) => {
                let n = self.shape(x)[0];
                vec![Some(self.expand_rows(g, n)?)]
            }
            Op::ExpandRows(_) => vec![Some(self.sum_rows(g)?)],
            Op::AddChannelBias(..) => {
                let gb = if need[1] { Some(self.sum_channels(g)?) } else { None };
                vec![Some(g), gb]
            }
            Op::SumChannels(x) => {
                let shape = self.shape(x).to_vec();
                vec![Some(self.expand_channels(g, &shape)?)]
            }
            Op::ExpandChannels(_) => vec![Some(self.sum_channels(g)?)],
            Op::Concat(a, b) => {
                let ca = self.shape(a)[1];
                let cb = self.shape(b)[1];
                let ga = if need[0] { Some(self.slice_channels(g, 0, ca)?) } else { None };
                let gb = if need[1] { Some(self.slice_channels(g, ca, cb)?) } else { None };
                vec![ga, gb]
            }
            Op::Slice { x, start } => {
                let (n, c, h, w) = self.value(x).dims4()?;
                let len = self.shape(out)[1];
                let mut acc = g;
                if start > 0 {
                    let z = self.constant(Tensor::zeros(&[n, start, h, w]))?;
                    acc = self.concat_channels(z, acc)?;
                }
                let after = c - start - len;
                if after > 0 {
                    let z = self.constant(Tensor::zeros(&[n, after, h, w]))?;
                    acc = self.concat_channels(acc, z)?;
                }
                vec![Some(acc)]
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (_, _, h, wd) = self.value(x).dims4()?;
                let k = self.shape(w)[2];
                let gx = if need[0] {
                    Some(self.conv_transpose2d_sized(g, w, stride, pad, (h, wd))?)
                } else {
                    None
                };
                let gw = if need[1] {
                    Some(self.conv2d_weight_grad(x, g, k, stride, pad)?)
                } else {
                    None
                };
                vec![gx, gw]
            }
            Op::ConvT { x, w, stride, pad } => {
                let k = self.shape(w)[2];
                let gx = if need[0] { Some(self.conv2d(g, w, None, stride, pad)?) } else { None };
                let gw = if need[1] {
                    Some(self.conv2d_weight_grad(g, x, k, stride, pad)?)
                } else {
                    None
                };
                vec![gx, gw]
            }
            Op::ConvWGrad { x, dy, stride, pad } => {
                let (_, _, h, wd) = self.value(x).dims4()?;
                let gx = if need[0] {
                    Some(self.conv_transpose2d_sized(dy, g, stride, pad, (h, wd))?)
                } else {
                    None
                };
                let gdy = if need[1] { Some(self.conv2d(x, g, None, stride, pad)?) } else { None };
                vec![gx, gdy]
            }
            Op::InstanceNorm { x, scale, stats, .. } => {
                if self.grad_enabled {
                    return Err(TensorError::NoDoubleBackward { op: "instance_norm" });
                }
                let (dx, ds, db) = kernels::instance_norm_backward(
                    self.value(x),
                    self.value(scale),
                    &stats,
                    self.value(g),
                );
                vec![
                    Some(self.constant(dx)?),
                    Some(self.constant(ds)?),
                    Some(self.constant(db)?),
                ]
            }
            Op::Custom(op, inputs) => {
                let grads = op.vjp(self, &inputs, out, g)?;
                if grads.len() != inputs.len() {
                    return Err(TensorError::Contract(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (gv, iv) in grads.iter().zip(&inputs) {
                    if let Some(gv) = gv {
                        same_shape(op.name(), self.value(*gv), self.value(*iv))?;
                    }
                }
                grads
            }
        };
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(&store, id).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn disconnected_parameter_gets_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::ones(&[2])).unwrap();
        let b = store.add("b", Tensor::ones(&[2])).unwrap();
        let mut tape = Tape::new();
        let va = tape.param(&store, a).unwrap();
        let _vb = tape.param(&store, b).unwrap();
        let s = tape.sum(va).unwrap();
        let grads = tape.backward(s).unwrap();
        grads.accumulate_into(&mut store);
        assert!(grads.get(&store, b).is_none());
        assert_eq!(store.get(b).grad.data(), &[0.0, 0.0]);
        assert_eq!(store.get(a).grad.data(), &[1.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::full(&[2], 3.0)).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id).unwrap();
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap().accumulate_into(&mut store);
        tape.backward(s).unwrap().accumulate_into(&mut store);
        assert_eq!(store.get(id).grad.data(), &[2.0, 2.0]);
        store.zero_grad();
        assert_eq!(store.get(id).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_a_contract_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[2]), true).unwrap();
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), false).unwrap();
        assert!(matches!(tape.log(x), Err(TensorError::NonFinite { op: "log" })));
        assert!(tape.leaf(Tensor::full(&[1], f32::NAN), false).is_err());
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[2]), false).unwrap();
        let b = tape.leaf(Tensor::zeros(&[3]), false).unwrap();
        assert!(matches!(tape.add(a, b), Err(TensorError::Dimension { .. })));
        let x = tape.leaf(Tensor::zeros(&[1, 3, 4, 4]), false).unwrap();
        let w = tape.leaf(Tensor::zeros(&[2, 2, 3, 3]), false).unwrap();
        assert!(matches!(tape.conv2d(x, w, None, 1, 1), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn second_derivative_of_cube() {
        // d/dx (d/dx x^3) = 6x
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.5, -2.0]).unwrap(), true).unwrap();
        let x2 = tape.mul(x, x).unwrap();
        let x3 = tape.mul(x2, x).unwrap();
        let s = tape.sum(x3).unwrap();
        let g = tape.grad(s, &[x], true).unwrap()[0].unwrap();
        assert_eq!(tape.value(g).data(), &[3.0 * 2.25, 3.0 * 4.0]);
        let gs = tape.sum(g).unwrap();
        let gg = tape.grad(gs, &[x], false).unwrap()[0].unwrap();
        assert_eq!(tape.value(gg).data(), &[9.0, -12.0]);
    }

    #[test]
    fn no_grad_tape_records_no_requirements() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::ones(&[2])).unwrap();
        let mut tape = Tape::no_grad();
        let w = tape.param(&store, id).unwrap();
        let y = tape.sigmoid(w).unwrap();
        assert!(!tape.requires_grad(y));
    }

    #[test]
    fn frozen_store_is_excluded() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::ones(&[2])).unwrap();
        let mut tape = Tape::new();
        tape.freeze(&store);
        let w = tape.param(&store, id).unwrap();
        let s = tape.sum(w).unwrap();
        assert!(tape.backward(s).unwrap().is_empty());
    }
}
