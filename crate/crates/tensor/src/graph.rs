//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s. Leaves created with
//! [`Graph::variable`] require gradients; leaves created with
//! [`Graph::constant`] do not, and gradient flow stops there. Ops whose inputs
//! are all constant are evaluated without saving backward state.

use crate::kernels::{self, ConvGeom};
use crate::{Float, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Sqrt,
    Rsqrt,
    Square,
    Abs,
}

impl Unary {
    fn apply<T: Float>(self, x: T) -> T {
        match self {
            Unary::Relu => x.max(T::zero()),
            Unary::LeakyRelu(a) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::of(a)
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Rsqrt => T::one() / x.sqrt(),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative<T: Float>(self, x: T, y: T) -> T {
        match self {
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::LeakyRelu(a) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::of(a)
                }
            }
            Unary::Tanh => T::one() - y * y,
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Softplus => T::one() / (T::one() + (-x).exp()),
            Unary::Exp => y,
            Unary::Log => T::one() / x,
            Unary::Sqrt => T::of(0.5) / y,
            Unary::Rsqrt => T::of(-0.5) * y * y * y,
            Unary::Square => T::of(2.0) * x,
            Unary::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Unary(Var, Unary),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    Upsample(Var),
    AvgPool(Var),
    Reshape(Var),
    SumAxis(Var, usize),
    SumAll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a computation for one forward/backward pass.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the leaves that required them.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that gradients flow into.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(T::of(v)))
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

    /// Copy of `v`'s value as a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = kernels::binary(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = kernels::binary(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = kernels::binary(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let y = kernels::binary(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Div(a, b), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let y = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(y, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let y = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(y, Op::MulScalar(a, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let y = self.value(a).map(|x| f.apply(x));
        let rg = self.rg(&[a]);
        self.push(y, Op::Unary(a, f), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn rsqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Rsqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    /// `x (N, I) * w (O, I)^T + b (O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = kernels::linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(y, Op::Linear { x, w, b }, rg)
    }

    /// 2-D convolution, NCHW input and OIHW weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad);
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[geom.o], "conv2d bias shape");
        }
        let keep = self.requires_grad(w);
        let (y, cols) = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &geom,
            keep,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(
            y,
            Op::Conv {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let y = kernels::upsample2x(self.value(x));
        let rg = self.rg(&[x]);
        self.push(y, Op::Upsample(x), rg)
    }

    pub fn avgpool2x(&mut self, x: Var) -> Var {
        let y = kernels::avgpool2x(self.value(x));
        let rg = self.rg(&[x]);
        self.push(y, Op::AvgPool(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self
            .value(x)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        let rg = self.rg(&[x]);
        self.push(y, Op::Reshape(x), rg)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let y = kernels::sum_axis(self.value(x), axis);
        let rg = self.rg(&[x]);
        self.push(y, Op::SumAxis(x, axis), rg)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let n = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(y, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum_all(x);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Per-sample, per-channel spatial mean of an NCHW tensor, shape (N, C, 1, 1).
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "spatial_mean expects NCHW");
        let flat = self.reshape(x, &[s[0], s[1], s[2] * s[3]]);
        let m = self.mean_axis(flat, 2);
        self.reshape(m, &[s[0], s[1], 1, 1])
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward needs a scalar, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Grads { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, || kernels::reduce_to(&g, self.shape(*a)));
                    self.acc(&mut grads, *b, || kernels::reduce_to(&g, self.shape(*b)));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, || kernels::reduce_to(&g, self.shape(*a)));
                    self.acc(&mut grads, *b, || {
                        kernels::reduce_to(&g, self.shape(*b)).map(|v| -v)
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, || {
                        kernels::reduce_to(&kernels::binary(&g, vb, |x, y| x * y), va.shape())
                    });
                    self.acc(&mut grads, *b, || {
                        kernels::reduce_to(&kernels::binary(&g, va, |x, y| x * y), vb.shape())
                    });
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, || {
                        kernels::reduce_to(&kernels::binary(&g, vb, |x, y| x / y), va.shape())
                    });
                    self.acc(&mut grads, *b, || {
                        // d(a/b)/db = -out / b
                        let t = kernels::binary(&g, &node.value, |x, y| -x * y);
                        kernels::reduce_to(&kernels::binary(&t, vb, |x, y| x / y), vb.shape())
                    });
                }
                Op::AddScalar(a) => {
                    self.acc(&mut grads, *a, || g.clone());
                }
                Op::MulScalar(a, s) => {
                    let s = *s;
                    self.acc(&mut grads, *a, || g.map(|v| v * s));
                }
                Op::Unary(a, f) => {
                    let x = self.value(*a);
                    self.acc(&mut grads, *a, || {
                        let data = g
                            .data()
                            .iter()
                            .zip(x.data())
                            .zip(node.value.data())
                            .map(|((&gv, &xv), &yv)| gv * f.derivative(xv, yv))
                            .collect();
                        Tensor::from_vec(x.shape(), data).unwrap()
                    });
                }
                Op::Linear { x, w, b } => {
                    let (need_x, need_w) = (self.requires_grad(*x), self.requires_grad(*w));
                    let (dx, dw, db) =
                        kernels::linear_backward(&g, self.value(*x), self.value(*w), need_x, need_w);
                    if let Some(dx) = dx {
                        self.acc(&mut grads, *x, || dx);
                    }
                    if let Some(dw) = dw {
                        self.acc(&mut grads, *w, || dw);
                    }
                    if let Some(b) = b {
                        self.acc(&mut grads, *b, || db);
                    }
                }
                Op::Conv {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    if self.requires_grad(*w) {
                        let dw = kernels::conv2d_grad_weight(
                            &g,
                            self.value(*x),
                            cols.as_deref(),
                            geom,
                        );
                        self.acc(&mut grads, *w, || dw);
                    }
                    if let Some(b) = b {
                        self.acc(&mut grads, *b, || kernels::conv2d_grad_bias(&g, geom));
                    }
                    if self.requires_grad(*x) {
                        let dx = kernels::conv2d_grad_input(&g, self.value(*w), geom);
                        self.acc(&mut grads, *x, || dx);
                    }
                }
                Op::Upsample(x) => {
                    self.acc(&mut grads, *x, || kernels::upsample2x_backward(&g));
                }
                Op::AvgPool(x) => {
                    self.acc(&mut grads, *x, || kernels::avgpool2x_backward(&g));
                }
                Op::Reshape(x) => {
                    self.acc(&mut grads, *x, || g.clone().reshape(self.shape(*x)).unwrap());
                }
                Op::SumAxis(x, axis) => {
                    self.acc(&mut grads, *x, || kernels::expand_axis(&g, self.shape(*x), *axis));
                }
                Op::SumAll(x) => {
                    let gv = g.item();
                    self.acc(&mut grads, *x, || Tensor::full(self.shape(*x), gv));
                }
            }
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: impl FnOnce() -> Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = g();
        match &mut grads[v.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(t(&[2], &[1.0, 2.0]));
        let b = g.variable(t(&[2], &[3.0, 5.0]));
        let p = g.mul(a, b);
        let s = g.sum_all(p);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(t(&[1], &[2.0]));
        let c = g.constant(t(&[1], &[4.0]));
        let p = g.mul(a, c);
        let s = g.sum_all(p);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(a).unwrap().data(), &[4.0]);
    }

    #[test]
    fn broadcast_gradient_is_summed() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.variable(t(&[3], &[0., 0., 0.]));
        let y = g.add(x, b);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[1], &[3.0]));
        let y = g.mul(x, x);
        let z = g.add(y, x);
        let s = g.sum_all(z);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(-1000.0f64), 0.0);
        assert_eq!(softplus(1000.0f64), 1000.0);
    }
}
