//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the record in reverse and returns the gradient of
//! a scalar with respect to every node that needs one.

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use crate::kernels::{self, ConvGeometry, CropBox};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, T),
    Powf(usize, T),
    Abs(usize),
    Relu(usize),
    LeakyRelu(usize, T),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Clamp(usize, T, T),
    Sum(usize),
    Mean(usize),
    MeanHw(usize),
    BroadcastHw(usize),
    KernelSqSum(usize),
    Reshape(usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, geo: ConvGeometry },
    Upsample(usize, usize),
    AddChannel(usize, usize),
    ConcatChannels(Vec<usize>),
    SelectBatch(usize, Vec<usize>),
    StackBatch(Vec<usize>),
    CropResize { x: usize, boxes: Vec<CropBox>, size: usize },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of recorded operations. Not thread safe; build one per computation.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T> Copy for Var<'_, T> {}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&self, value: Arc<Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Shares a parameter tensor without copying it.
    pub fn leaf_shared(&self, value: Arc<Tensor<T>>, needs_grad: bool) -> Var<'_, T> {
        self.push_arc(value, Op::Leaf, needs_grad)
    }

    fn unary(&self, x: Var<'_, T>, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let needs = self.needs(x.id);
        self.push(value, op, needs)
    }

    pub fn conv2d<'g>(
        &'g self,
        x: Var<'g, T>,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Var<'g, T> {
        let geo = ConvGeometry { stride, pad };
        let xv = x.value();
        let wv = weight.value();
        let bv = bias.map(|b| b.value());
        let out = kernels::conv2d_forward(&xv, &wv, bv.as_deref(), geo);
        let needs = x.needs_grad() || weight.needs_grad() || bias.is_some_and(|b| b.needs_grad());
        self.push(out, Op::Conv2d { x: x.id, w: weight.id, b: bias.map(|b| b.id), geo }, needs)
    }

    pub fn concat_channels<'g>(&'g self, parts: &[Var<'g, T>]) -> Var<'g, T> {
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (b, _, h, w) = values[0].dims4();
        let total: usize = values
            .iter()
            .map(|v| {
                let (vb, vc, vh, vw) = v.dims4();
                assert_eq!((vb, vh, vw), (b, h, w), "concat_channels: mismatched dims");
                vc
            })
            .sum();
        let mut data = Vec::with_capacity(b * total * h * w);
        for bi in 0..b {
            for v in &values {
                let c = v.shape()[1];
                data.extend_from_slice(&v.data()[bi * c * h * w..(bi + 1) * c * h * w]);
            }
        }
        let needs = parts.iter().any(|p| p.needs_grad());
        self.push(
            Tensor::new(&[b, total, h, w], data),
            Op::ConcatChannels(parts.iter().map(|p| p.id).collect()),
            needs,
        )
    }

    pub fn stack_batch<'g>(&'g self, parts: &[Var<'g, T>]) -> Var<'g, T> {
        let values: Vec<Tensor<T>> = parts.iter().map(|p| (*p.value()).clone()).collect();
        let needs = parts.iter().any(|p| p.needs_grad());
        self.push(Tensor::stack_batch(&values), Op::StackBatch(parts.iter().map(|p| p.id).collect()), needs)
    }

    pub fn crop_resize<'g>(&'g self, x: Var<'g, T>, boxes: &[CropBox], size: usize) -> Var<'g, T> {
        let out = kernels::crop_resize(&x.value(), boxes, size);
        self.unary(x, out, Op::CropResize { x: x.id, boxes: boxes.to_vec(), size })
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));

        let accumulate = |grads: &mut Vec<Option<Tensor<T>>>, id: usize, g: Tensor<T>| {
            if !nodes[id].needs_grad {
                return;
            }
            match &mut grads[id] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if nodes[*a].needs_grad {
                        accumulate(&mut grads, *a, g.zip_map(&nodes[*b].value, |g, y| g * y));
                    }
                    if nodes[*b].needs_grad {
                        accumulate(&mut grads, *b, g.zip_map(&nodes[*a].value, |g, x| g * x));
                    }
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::MulScalar(a, k) => accumulate(&mut grads, *a, g.scale(*k)),
                Op::Powf(a, p) => {
                    let p = *p;
                    let d = g.zip_map(&nodes[*a].value, |g, x| g * p * x.powf(p - T::one()));
                    accumulate(&mut grads, *a, d);
                }
                Op::Abs(a) => {
                    let d = g.zip_map(&nodes[*a].value, |g, x| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = g.zip_map(&nodes[*a].value, |g, x| if x > T::zero() { g } else { T::zero() });
                    accumulate(&mut grads, *a, d);
                }
                Op::LeakyRelu(a, slope) => {
                    let s = *slope;
                    let d = g.zip_map(&nodes[*a].value, |g, x| if x > T::zero() { g } else { g * s });
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(out, |g, y| g * y * (T::one() - y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(out, |g, y| g * (T::one() - y * y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Softplus(a) => {
                    let d = g.zip_map(&nodes[*a].value, |g, x| g * sigmoid(x));
                    accumulate(&mut grads, *a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let d = g.zip_map(&nodes[*a].value, |g, x| if x >= lo && x <= hi { g } else { T::zero() });
                    accumulate(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    accumulate(&mut grads, *a, Tensor::full(nodes[*a].value.shape(), gv));
                }
                Op::Mean(a) => {
                    let src = &nodes[*a].value;
                    let gv = g.item() / T::from_usize(src.len()).unwrap();
                    accumulate(&mut grads, *a, Tensor::full(src.shape(), gv));
                }
                Op::MeanHw(a) => {
                    let src = &nodes[*a].value;
                    let (_, _, h, w) = src.dims4();
                    let inv = T::one() / T::from_usize(h * w).unwrap();
                    let d = Tensor::from_fn(src.shape(), |i| g.data()[i / (h * w)] * inv);
                    accumulate(&mut grads, *a, d);
                }
                Op::BroadcastHw(a) => {
                    let src = &nodes[*a].value;
                    let (_, _, h, w) = out.dims4();
                    let d: Vec<T> = g.data().chunks(h * w).map(|plane| plane.iter().copied().sum()).collect();
                    accumulate(&mut grads, *a, Tensor::new(src.shape(), d));
                }
                Op::KernelSqSum(a) => {
                    let src = &nodes[*a].value;
                    let (_, _, k, _) = src.dims4();
                    let two = T::lit(2.0);
                    let d = Tensor::from_fn(src.shape(), |i| two * src.data()[i] * g.data()[i / (k * k)]);
                    accumulate(&mut grads, *a, d);
                }
                Op::Reshape(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    accumulate(&mut grads, *a, g.reshape(&shape));
                }
                Op::Conv2d { x, w, b, geo } => {
                    let cg = kernels::conv2d_backward(
                        &nodes[*x].value,
                        &nodes[*w].value,
                        &g,
                        *geo,
                        nodes[*x].needs_grad,
                        nodes[*w].needs_grad,
                        b.is_some_and(|b| nodes[b].needs_grad),
                    );
                    if let Some(d) = cg.input {
                        accumulate(&mut grads, *x, d);
                    }
                    if let Some(d) = cg.weight {
                        accumulate(&mut grads, *w, d);
                    }
                    if let (Some(b), Some(d)) = (b, cg.bias) {
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::AddChannel(a, b) => {
                    if nodes[*b].needs_grad {
                        let (bn, c, h, w) = out.dims4();
                        let mut d = vec![T::zero(); c];
                        for (i, plane) in g.data().chunks(h * w).enumerate().take(bn * c) {
                            d[i % c] += plane.iter().copied().sum::<T>();
                        }
                        accumulate(&mut grads, *b, Tensor::new(nodes[*b].value.shape(), d));
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Upsample(a, f) => {
                    accumulate(&mut grads, *a, kernels::upsample_nearest_backward(&g, *f));
                }
                Op::ConcatChannels(parts) => {
                    let (b, _, h, w) = out.dims4();
                    let total = out.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let c = nodes[p].value.shape()[1];
                        if nodes[p].needs_grad {
                            let mut d = Vec::with_capacity(b * c * h * w);
                            for bi in 0..b {
                                let start = (bi * total + offset) * h * w;
                                d.extend_from_slice(&g.data()[start..start + c * h * w]);
                            }
                            accumulate(&mut grads, p, Tensor::new(nodes[p].value.shape(), d));
                        }
                        offset += c;
                    }
                }
                Op::SelectBatch(a, indices) => {
                    let src = &nodes[*a].value;
                    let per = src.len() / src.shape()[0];
                    let mut d = Tensor::zeros(src.shape());
                    for (k, &i) in indices.iter().enumerate() {
                        let dst = &mut d.data_mut()[i * per..(i + 1) * per];
                        for (acc, &v) in dst.iter_mut().zip(&g.data()[k * per..(k + 1) * per]) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::StackBatch(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = nodes[p].value.len();
                        let d = Tensor::new(nodes[p].value.shape(), g.data()[start..start + n].to_vec());
                        accumulate(&mut grads, p, d);
                        start += n;
                    }
                }
                Op::CropResize { x, boxes, size } => {
                    let d = kernels::crop_resize_backward(nodes[*x].value.shape(), boxes, *size, &g);
                    accumulate(&mut grads, *x, d);
                }
            }
        }
        Gradients { grads }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log(1 + e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn needs_grad(&self) -> bool {
        self.graph.needs(self.id)
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.leaf_shared(self.value(), false)
    }

    fn binary(self, other: Var<'g, T>, f: impl Fn(T, T) -> T, op: Op<T>) -> Var<'g, T> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "elementwise op on shapes {:?} and {:?}", a.shape(), b.shape());
        let out = a.zip_map(&b, f);
        let needs = self.needs_grad() || other.needs_grad();
        self.graph.push(out, op, needs)
    }

    fn map(self, f: impl Fn(T) -> T, op: Op<T>) -> Var<'g, T> {
        let out = self.value().map(f);
        self.graph.unary(self, out, op)
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        self.map(|v| v + c, Op::AddScalar(self.id))
    }

    pub fn scale(self, k: T) -> Var<'g, T> {
        self.map(|v| v * k, Op::MulScalar(self.id, k))
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn powf(self, p: T) -> Var<'g, T> {
        self.map(|v| v.powf(p), Op::Powf(self.id, p))
    }

    pub fn square(self) -> Var<'g, T> {
        self.mul(self)
    }

    pub fn abs(self) -> Var<'g, T> {
        self.map(|v| v.abs(), Op::Abs(self.id))
    }

    pub fn relu(self) -> Var<'g, T> {
        self.map(|v| v.max(T::zero()), Op::Relu(self.id))
    }

    pub fn leaky_relu(self, slope: T) -> Var<'g, T> {
        self.map(move |v| if v > T::zero() { v } else { v * slope }, Op::LeakyRelu(self.id, slope))
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.map(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.map(|v| v.tanh(), Op::Tanh(self.id))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'g, T> {
        self.map(softplus, Op::Softplus(self.id))
    }

    pub fn clamp(self, lo: T, hi: T) -> Var<'g, T> {
        self.map(move |v| v.max(lo).min(hi), Op::Clamp(self.id, lo, hi))
    }

    pub fn sum(self) -> Var<'g, T> {
        let out = Tensor::scalar(self.value().sum());
        self.graph.unary(self, out, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g, T> {
        let out = Tensor::scalar(self.value().mean());
        self.graph.unary(self, out, Op::Mean(self.id))
    }

    /// Spatial mean, `[B, C, H, W] -> [B, C, 1, 1]`.
    pub fn mean_hw(self) -> Var<'g, T> {
        let v = self.value();
        let (b, c, h, w) = v.dims4();
        let inv = T::one() / T::from_usize(h * w).unwrap();
        let data: Vec<T> = v.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        self.graph.unary(self, Tensor::new(&[b, c, 1, 1], data), Op::MeanHw(self.id))
    }

    /// Spatial broadcast, `[B, C, 1, 1] -> [B, C, h, w]`.
    pub fn broadcast_hw(self, h: usize, w: usize) -> Var<'g, T> {
        let v = self.value();
        let (b, c, one_h, one_w) = v.dims4();
        assert_eq!((one_h, one_w), (1, 1), "broadcast_hw expects a 1x1 spatial input");
        let mut data = Vec::with_capacity(b * c * h * w);
        for &x in v.data() {
            data.extend(std::iter::repeat_n(x, h * w));
        }
        self.graph.unary(self, Tensor::new(&[b, c, h, w], data), Op::BroadcastHw(self.id))
    }

    /// Sum of squares over the kernel window, `[O, I, k, k] -> [O, I, 1, 1]`.
    pub fn kernel_sq_sum(self) -> Var<'g, T> {
        let v = self.value();
        let (o, i, k, _) = v.dims4();
        let data: Vec<T> = v.data().chunks(k * k).map(|p| p.iter().map(|&x| x * x).sum()).collect();
        self.graph.unary(self, Tensor::new(&[o, i, 1, 1], data), Op::KernelSqSum(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let out = (*self.value()).clone().reshape(shape);
        self.graph.unary(self, out, Op::Reshape(self.id))
    }

    pub fn upsample(self, factor: usize) -> Var<'g, T> {
        if factor == 1 {
            return self;
        }
        let out = kernels::upsample_nearest(&self.value(), factor);
        self.graph.unary(self, out, Op::Upsample(self.id, factor))
    }

    /// Adds a per-channel vector `[C]` to `[B, C, H, W]`.
    pub fn add_channel(self, bias: Var<'g, T>) -> Var<'g, T> {
        let v = self.value();
        let b = bias.value();
        let (_, c, h, w) = v.dims4();
        assert_eq!(b.len(), c, "add_channel: {} biases for {c} channels", b.len());
        let out = Tensor::from_fn(v.shape(), |i| v.data()[i] + b.data()[(i / (h * w)) % c]);
        let needs = self.needs_grad() || bias.needs_grad();
        self.graph.push(out, Op::AddChannel(self.id, bias.id), needs)
    }

    pub fn select_batch(self, indices: &[usize]) -> Var<'g, T> {
        let out = self.value().select_batch(indices);
        self.graph.unary(self, out, Op::SelectBatch(self.id, indices.to_vec()))
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

macro_rules! var_binop {
    ($tr:ident, $method:ident) => {
        impl<'g, T: Scalar> std::ops::$tr for Var<'g, T> {
            type Output = Var<'g, T>;
            fn $method(self, rhs: Self) -> Self::Output {
                Var::$method(self, rhs)
            }
        }
    };
}
var_binop!(Add, add);
var_binop!(Sub, sub);
var_binop!(Mul, mul);

impl<'g, T: Scalar> std::ops::Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Self::Output {
        Var::neg(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&Graph<f64>, Var<'_, f64>) -> f64, build: impl for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Var<'g, f64>, x0: Tensor<f64>) {
        let g = Graph::new();
        let x = g.input(x0.clone());
        let loss = build(&g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += h;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= h;
            let gp = Graph::new();
            let fp = f(&gp, gp.input(plus));
            let gm = Graph::new();
            let fm = f(&gm, gm.input(minus));
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((a - numeric).abs() <= 1e-5 * (1.0 + a.abs()), "elem {i}: analytic {a} numeric {numeric}");
        }
    }

    fn chain<'g>(g: &'g Graph<f64>, x: Var<'g, f64>) -> Var<'g, f64> {
        let w = g.constant(Tensor::from_fn(&[2, 3, 3, 3], |i| ((i % 7) as f64 - 3.0) / 4.0));
        let b = g.constant(Tensor::new(&[2], vec![0.1, -0.2]));
        let y = g.conv2d(x, w, Some(b), 1, 1);
        let z = y.leaky_relu(0.2).upsample(2).tanh();
        let s = z.mean_hw().broadcast_hw(2, 2).sigmoid();
        let crops = g.crop_resize(z, &[CropBox { batch: 0, y0: 1, x0: 2, height: 5, width: 4 }], 3);
        let cat = g.concat_channels(&[s, s.square()]);
        let p = cat.add_scalar(1.5).powf(-0.5).softplus().mean();
        let q = crops.abs().mean() + y.select_batch(&[1, 0, 1]).clamp(-0.5, 0.5).sum().scale(0.01);
        p + q - x.kernel_sq_sum_like()
    }

    trait KernelSqLike<'g> {
        fn kernel_sq_sum_like(self) -> Var<'g, f64>;
    }
    impl<'g> KernelSqLike<'g> for Var<'g, f64> {
        fn kernel_sq_sum_like(self) -> Var<'g, f64> {
            // [2,3,4,4] viewed as [6,1,4,4] kernels
            self.reshape(&[6, 1, 4, 4]).kernel_sq_sum().mean().scale(0.1)
        }
    }

    #[test]
    fn composite_chain_matches_finite_differences() {
        let x0 = Tensor::from_fn(&[2, 3, 4, 4], |i| ((i * 17 % 23) as f64 - 11.0) / 9.0);
        fd_check(|g, x| chain(g, x).item(), chain, x0);
    }

    #[test]
    fn add_channel_gradients() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2, 3, 2, 2]));
        let b = g.input(Tensor::new(&[3], vec![1.0, 2.0, 3.0]));
        let y = x.add_channel(b);
        assert_eq!(y.value().get4(1, 2, 1, 0), 3.0);
        let wts = g.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64));
        let grads = g.backward((y * wts).sum());
        // Channel c collects indices c*4..c*4+4 and 12+c*4..12+c*4+4.
        let oracle: Vec<f64> = (0..3).map(|c| (0..4).map(|k| (c * 4 + k) as f64 + (12 + c * 4 + k) as f64).sum()).collect();
        assert_eq!(grads.get(b).unwrap().data(), &oracle[..]);
        assert_eq!(grads.get(x).unwrap(), &*wts.value());
    }

    #[test]
    fn stack_batch_grad_splits() {
        let g = Graph::<f64>::new();
        let a = g.input(Tensor::ones(&[1, 1, 1, 2]));
        let b = g.input(Tensor::ones(&[2, 1, 1, 2]));
        let s = g.stack_batch(&[a, b]);
        let wts = g.constant(Tensor::from_fn(&[3, 1, 1, 2], |i| i as f64));
        let grads = g.backward((s * wts).sum());
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::<f32>::new();
        let c = g.constant(Tensor::ones(&[3]));
        let x = g.input(Tensor::ones(&[3]));
        let grads = g.backward((c * x).sum());
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0f32), 1000.0);
        assert!(softplus(-1000.0f32) >= 0.0);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
