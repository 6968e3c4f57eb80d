//! Layer building blocks with equalized learning rate: weights are stored at
//! unit scale and multiplied by `1/sqrt(fan_in)` on every forward pass.

use pir_tensor::{Bound, Float, Graph, ParamSet, Tensor, Var};
use rand::Rng;

use crate::error::{PirError, Result};

pub(crate) const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Dense layer `name.w` (out, in) stored with std `1/lr_mul`, bias `name.b`.
pub(crate) fn init_dense<T: Float, R: Rng + ?Sized>(
    ps: &mut ParamSet<T>,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    lr_mul: f64,
    bias_init: f64,
) {
    ps.insert(format!("{name}.w"), Tensor::randn(&[fan_out, fan_in], 1.0 / lr_mul, rng));
    ps.insert(
        format!("{name}.b"),
        Tensor::full(&[fan_out], T::of(bias_init / lr_mul)),
    );
}

pub(crate) fn init_conv<T: Float, R: Rng + ?Sized>(
    ps: &mut ParamSet<T>,
    rng: &mut R,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    bias: bool,
) {
    ps.insert(format!("{name}.w"), Tensor::randn(&[cout, cin, k, k], 1.0, rng));
    if bias {
        ps.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }
}

pub(crate) fn dense<T: Float>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, lr_mul: f64) -> Var {
    let w = p.var(&format!("{name}.w"));
    let fan_in = g.shape(w)[1] as f64;
    let w = g.mul_scalar(w, lr_mul / fan_in.sqrt());
    let b = p.var(&format!("{name}.b"));
    let b = if lr_mul == 1.0 { b } else { g.mul_scalar(b, lr_mul) };
    g.linear(x, w, Some(b))
}

/// Scaled convolution weight `name.w` as a graph value.
pub(crate) fn conv_weight<T: Float>(g: &mut Graph<T>, p: &Bound, name: &str) -> Var {
    let w = p.var(&format!("{name}.w"));
    let s = g.shape(w);
    let fan_in = (s[1] * s[2] * s[3]) as f64;
    g.mul_scalar(w, 1.0 / fan_in.sqrt())
}

pub(crate) fn conv<T: Float>(
    g: &mut Graph<T>,
    p: &Bound,
    name: &str,
    x: Var,
    stride: usize,
) -> Var {
    let w = conv_weight(g, p, name);
    let pad = g.shape(w)[2] / 2;
    let b = p.try_var(&format!("{name}.b"));
    g.conv2d(x, w, b, stride, pad)
}

/// `lrelu(x, 0.2) * sqrt(2)`, variance preserving for unit-scale inputs.
pub(crate) fn lrelu_gain<T: Float>(g: &mut Graph<T>, x: Var) -> Var {
    let a = g.leaky_relu(x, 0.2);
    g.mul_scalar(a, SQRT2)
}

pub(crate) fn instance_norm<T: Float>(g: &mut Graph<T>, x: Var, eps: f64) -> Var {
    let mu = g.spatial_mean(x);
    let c = g.sub(x, mu);
    let sq = g.square(c);
    let var = g.spatial_mean(sq);
    let ve = g.add_scalar(var, eps);
    let r = g.rsqrt(ve);
    g.mul(c, r)
}

/// Normalize each row of an (N, D) tensor by its root mean square.
pub(crate) fn pixel_norm<T: Float>(g: &mut Graph<T>, x: Var) -> Var {
    let sq = g.square(x);
    let ms = g.mean_axis(sq, 1);
    let ms = g.add_scalar(ms, 1e-8);
    let r = g.rsqrt(ms);
    g.mul(x, r)
}

/// `got` must hold exactly the names and shapes of `reference`.
pub(crate) fn check_layout<T: Float>(reference: &ParamSet<T>, got: &ParamSet<T>, what: &str) -> Result<()> {
    for (name, t) in reference.iter() {
        let g = got
            .get(name)
            .map_err(|_| PirError::Checkpoint(format!("{what} parameter `{name}` is missing")))?;
        if g.shape() != t.shape() {
            return Err(PirError::Checkpoint(format!(
                "{what} parameter `{name}` has shape {:?}, expected {:?}",
                g.shape(),
                t.shape()
            )));
        }
    }
    if got.len() != reference.len() {
        return Err(PirError::Checkpoint(format!("{what} parameter set has extra entries")));
    }
    Ok(())
}
