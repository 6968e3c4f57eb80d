//! Every differentiable op against central finite differences in f64.

use pir_tensor::{Graph, Tensor, Unary, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Builds a scalar from the leaves in `inputs`; `weights` keeps the loss
/// from being a plain sum so every output element gets a distinct adjoint.
fn check<F>(inputs: &[Tensor<f64>], build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>]| -> (f64, Vec<Option<Tensor<f64>>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars);
        let shape = g.shape(out).to_vec();
        let n = g.value(out).len();
        let w = Tensor::from_vec(
            &shape,
            (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect(),
        )
        .unwrap();
        let wv = g.constant(w);
        let p = g.mul(out, wv);
        let loss = g.sum_all(p);
        let grads = g.backward(loss);
        let gs = vars.iter().map(|v| grads.get(*v).cloned()).collect();
        (g.value(loss).item(), gs)
    };
    let (_, analytic) = eval(inputs);
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let ga = analytic[k].as_ref().expect("gradient for every input");
        for idx in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= h;
            let num = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let ana = ga.data()[idx];
            let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-3);
            assert!(err < 1e-5, "input {k} idx {idx}: analytic {ana} numeric {num}");
        }
    }
}

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    rnd(shape, seed).map(|v| v.abs() + 0.5)
}

#[test]
fn broadcast_arithmetic() {
    check(&[rnd(&[2, 3, 2], 1), rnd(&[3, 1], 2)], |g, v| {
        let a = g.add(v[0], v[1]);
        let b = g.mul(a, v[1]);
        g.sub(b, v[0])
    });
    check(&[rnd(&[2, 3], 3), positive(&[1, 3], 4)], |g, v| g.div(v[0], v[1]));
}

#[test]
fn unary_ops() {
    let kinds = [
        Unary::Tanh,
        Unary::Sigmoid,
        Unary::Softplus,
        Unary::Exp,
        Unary::Square,
        Unary::LeakyRelu(0.2),
        Unary::Relu,
        Unary::Abs,
    ];
    for (i, f) in kinds.into_iter().enumerate() {
        check(&[rnd(&[5], 10 + i as u64)], move |g, v| g.unary(v[0], f));
    }
    for f in [Unary::Log, Unary::Sqrt, Unary::Rsqrt] {
        check(&[positive(&[4], 20)], move |g, v| g.unary(v[0], f));
    }
}

#[test]
fn scalar_ops_and_reductions() {
    check(&[rnd(&[2, 3, 4], 5)], |g, v| {
        let a = g.mul_scalar(v[0], 1.7);
        let b = g.add_scalar(a, -0.3);
        let s = g.sum_axis(b, 1);
        let m = g.mean_axis(s, 2);
        g.reshape(m, &[2])
    });
    check(&[rnd(&[2, 3, 2, 2], 6)], |g, v| g.spatial_mean(v[0]));
    check(&[rnd(&[3, 2], 7)], |g, v| g.mean_all(v[0]));
}

#[test]
fn linear_layer() {
    check(&[rnd(&[3, 4], 8), rnd(&[2, 4], 9), rnd(&[2], 10)], |g, v| {
        g.linear(v[0], v[1], Some(v[2]))
    });
}

#[test]
fn conv_variants() {
    for &(stride, pad, k, h) in &[(1, 1, 3, 5), (2, 1, 3, 6), (1, 0, 1, 3), (2, 0, 2, 4)] {
        check(
            &[rnd(&[2, 2, h, h], 11), rnd(&[3, 2, k, k], 12), rnd(&[3], 13)],
            move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad),
        );
    }
}

#[test]
fn resampling() {
    check(&[rnd(&[1, 2, 2, 3], 14)], |g, v| g.upsample2x(v[0]));
    check(&[rnd(&[1, 2, 4, 2], 15)], |g, v| g.avgpool2x(v[0]));
}

proptest! {
    #[test]
    fn broadcast_add_commutes(a in prop::collection::vec(-10.0f64..10.0, 6), b in prop::collection::vec(-10.0f64..10.0, 3)) {
        let ta = Tensor::from_vec(&[2, 3], a).unwrap();
        let tb = Tensor::from_vec(&[3], b).unwrap();
        let mut g = Graph::new();
        let (va, vb) = (g.constant(ta), g.constant(tb));
        let x = g.add(va, vb);
        let y = g.add(vb, va);
        prop_assert_eq!(g.value(x), g.value(y));
    }

    #[test]
    fn reshape_preserves_data(v in prop::collection::vec(-1.0f32..1.0, 24)) {
        let t = Tensor::from_vec(&[2, 3, 4], v.clone()).unwrap();
        let r = t.reshape(&[4, 6]).unwrap();
        prop_assert_eq!(r.data(), &v[..]);
    }
}
