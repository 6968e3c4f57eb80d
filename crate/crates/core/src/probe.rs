//! Small classifiers used as measuring instruments: a convolutional probe
//! (content class or domain) and a linear probe on raw pixels.

use pir_tensor::{Adam, Bound, Float, Graph, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{PirError, Result};
use crate::image::CHANNELS;
use crate::models::INFER_CHUNK;
use crate::nn::{conv, dense, init_conv, init_dense};
use crate::perceptual::FeatureStack;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    /// Three convolutions (`l0..l2`, strides 1, 2, 2), flattened into a dense head.
    Conv,
    /// One dense layer on the flattened pixels.
    Linear,
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub kind: ProbeKind,
    pub classes: usize,
    pub resolution: usize,
    pub params: ParamSet<f32>,
}

#[derive(Clone, Debug)]
pub struct ProbeTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Pixel noise and per-image brightness/contrast jitter during training.
    pub augment: bool,
}

impl Default for ProbeTraining {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
            augment: true,
        }
    }
}

const TRUNK: [usize; 3] = [16, 32, 32];

impl Probe {
    pub fn new(kind: ProbeKind, classes: usize, resolution: usize, seed: u64) -> Result<Self> {
        if classes < 2 || resolution < 4 || !resolution.is_multiple_of(4) {
            return Err(PirError::arg("probe needs >= 2 classes and a resolution divisible by 4"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        match kind {
            ProbeKind::Conv => {
                let mut cin = CHANNELS;
                for (i, &w) in TRUNK.iter().enumerate() {
                    init_conv(&mut ps, &mut rng, &format!("l{i}"), cin, w, 3, true);
                    cin = w;
                }
                let r4 = resolution / 4;
                init_dense(&mut ps, &mut rng, "head", cin * r4 * r4, classes, 1.0, 0.0);
            }
            ProbeKind::Linear => {
                init_dense(&mut ps, &mut rng, "head", CHANNELS * resolution * resolution, classes, 1.0, 0.0);
            }
        }
        Ok(Self {
            kind,
            classes,
            resolution,
            params: ps,
        })
    }

    fn logits(&self, g: &mut Graph<f32>, p: &Bound, x: Var) -> Var {
        let mut h = x;
        if self.kind == ProbeKind::Conv {
            for i in 0..TRUNK.len() {
                h = conv(g, p, &format!("l{i}"), h, if i == 0 { 1 } else { 2 });
                h = g.leaky_relu(h, 0.2);
            }
        }
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, &[s[0], s[1..].iter().product()]);
        dense(g, p, "head", flat, 1.0)
    }

    fn check(&self, images: &Tensor<f32>) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1] != CHANNELS || s[2] != self.resolution || s[3] != self.resolution {
            return Err(PirError::arg(format!(
                "probe expects (n, 3, {r}, {r}) images, got {s:?}",
                r = self.resolution
            )));
        }
        Ok(())
    }

    /// Fit on labelled images with softmax cross-entropy.
    pub fn train(&mut self, images: &Tensor<f32>, labels: &[usize], opts: &ProbeTraining) -> Result<f64> {
        self.check(images)?;
        if labels.len() != images.dim(0) || labels.iter().any(|&l| l >= self.classes) {
            return Err(PirError::arg("labels must match images and lie below the class count"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut opt = Adam::new(&self.params, opts.lr, 0.9, 0.999);
        let n = images.dim(0);
        let mut last = f64::NAN;
        for _ in 0..opts.steps {
            let idx: Vec<usize> = (0..opts.batch_size).map(|_| rng.random_range(0..n)).collect();
            let mut x = images.select_outer(&idx);
            if opts.augment {
                augment(&mut x, &mut rng);
            }
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, true);
            let xv = g.constant(x);
            let logits = self.logits(&mut g, &p, xv);
            let loss = cross_entropy(&mut g, logits, &y);
            last = g.value(loss).item() as f64;
            let mut grads = g.backward(loss);
            opt.step(&mut self.params, &p.grads(&mut grads));
        }
        Ok(last)
    }

    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        self.check(images)?;
        let n = images.dim(0);
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + INFER_CHUNK).min(n);
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let x = g.constant(images.slice_outer(start, end));
            let l = self.logits(&mut g, &p, x);
            for row in g.value(l).data().chunks(self.classes) {
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
                out.push(best.0);
            }
            start = end;
        }
        Ok(out)
    }

    pub fn accuracy(&self, images: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(images)?;
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    /// The convolutional trunk as a feature stack, for a trained feature backend.
    pub fn trunk(&self) -> Result<FeatureStack<f32>> {
        if self.kind != ProbeKind::Conv {
            return Err(PirError::arg("only convolutional probes have a trunk"));
        }
        FeatureStack::from_params(self.params.clone())
    }
}

/// Mean of `logsumexp(logits) - logits[label]`; the row maximum is subtracted
/// as a constant for stability.
fn cross_entropy<T: Float>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Var {
    let (n, k) = (g.shape(logits)[0], g.shape(logits)[1]);
    let v = g.value(logits).clone();
    let maxes: Vec<T> = v
        .data()
        .chunks(k)
        .map(|r| r.iter().copied().fold(T::neg_infinity(), T::max))
        .collect();
    let mut onehot = vec![T::zero(); n * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = T::one();
    }
    let m = g.constant(Tensor::from_vec(&[n, 1], maxes).expect("row maxima"));
    let oh = g.constant(Tensor::from_vec(&[n, k], onehot).expect("one-hot"));
    let shifted = g.sub(logits, m);
    let e = g.exp(shifted);
    let s = g.sum_axis(e, 1);
    let lse = g.ln(s);
    let lse = g.add(lse, m);
    let picked = g.mul(logits, oh);
    let picked = g.sum_axis(picked, 1);
    let per = g.sub(lse, picked);
    g.mean_all(per)
}

fn augment<R: Rng>(x: &mut Tensor<f32>, rng: &mut R) {
    let per = x.len() / x.dim(0);
    for img in x.data_mut().chunks_mut(per) {
        let gain = 1.0 + 0.15 * (rng.random::<f32>() * 2.0 - 1.0);
        let shift = 0.1 * (rng.random::<f32>() * 2.0 - 1.0);
        let sigma = 0.08 * rng.random::<f32>();
        for v in img.iter_mut() {
            let n: f32 = StandardNormal.sample(rng);
            *v = (*v * gain + shift + sigma * n).clamp(-1.0, 1.0);
        }
    }
}
