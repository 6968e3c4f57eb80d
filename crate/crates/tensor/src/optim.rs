use crate::params::ParamGrads;
use crate::{Float, ParamSet};

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ParamSet<T>,
    v: ParamSet<T>,
}

impl<T: Float> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&ParamSet<T>, &ParamSet<T>) {
        (&self.m, &self.v)
    }

    /// Rebuild from checkpointed moments.
    pub fn from_state(
        lr: f64,
        beta1: f64,
        beta2: f64,
        step: u64,
        m: ParamSet<T>,
        v: ParamSet<T>,
    ) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step,
            m,
            v,
        }
    }

    /// Apply one update. Parameters absent from `grads` keep their value
    /// and moments.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamGrads<T>) {
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        let step_size = T::of(self.lr * c2.sqrt() / c1);
        let eps = T::of(self.eps * c2.sqrt());
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            assert_eq!(g.shape(), p.shape(), "gradient shape for `{name}`");
            let m = self.m.get_mut(name).expect("moment for parameter");
            for (mv, &gv) in m.data_mut().iter_mut().zip(g.data()) {
                *mv = b1 * *mv + one_b1 * gv;
            }
            let v = self.v.get_mut(name).expect("moment for parameter");
            for (vv, &gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = b2 * *vv + one_b2 * gv * gv;
            }
            let (m, v) = (self.m.get(name).unwrap(), self.v.get(name).unwrap());
            for ((pv, &mv), &vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *pv -= step_size * mv / (vv.sqrt() + eps);
            }
        }
    }
}
