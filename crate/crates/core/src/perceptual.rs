//! Deep-feature image distance. Features of each layer are unit-normalized
//! along channels; the distance is the spatially averaged squared difference,
//! summed over layers.

use pir_tensor::{par, Float, Graph, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PirError, Result};
use crate::image::CHANNELS;
use crate::models::INFER_CHUNK;
use crate::nn::{conv, init_conv};

const NORM_EPS: f64 = 1e-10;

/// Source of feature maps for the perceptual distance.
pub trait PerceptualBackend<T: Float>: Send + Sync {
    /// Feature maps (N, C_l, H_l, W_l) of an image batch, one per layer.
    fn features(&self, g: &mut Graph<T>, x: Var) -> Vec<Var>;
}

/// Convolution stack `l0, l1, ...`: the first layer keeps resolution, every
/// later one halves it, each followed by a leaky ReLU.
#[derive(Clone, Debug)]
pub struct FeatureStack<T: Float> {
    pub params: ParamSet<T>,
    depth: usize,
}

pub const DEFAULT_WIDTHS: [usize; 3] = [16, 32, 32];

impl<T: Float> FeatureStack<T> {
    /// Fixed-seed random weights; needs no external data.
    pub fn random(seed: u64) -> Self {
        Self::random_with_widths(seed, &DEFAULT_WIDTHS)
    }

    pub fn random_with_widths(seed: u64, widths: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::<f64>::new();
        let mut cin = CHANNELS;
        for (i, &w) in widths.iter().enumerate() {
            init_conv(&mut ps, &mut rng, &format!("l{i}"), cin, w, 3, true);
            cin = w;
        }
        Self {
            params: ps.cast(),
            depth: widths.len(),
        }
    }

    /// Trained weights laid out as `l{i}.w` / `l{i}.b`, for instance a probe trunk.
    pub fn from_params(params: ParamSet<T>) -> Result<Self> {
        let mut depth = 0;
        let mut cin = CHANNELS;
        while let Ok(w) = params.get(&format!("l{depth}.w")) {
            let s = w.shape();
            if s.len() != 4 || s[1] != cin || s[2] != s[3] || s[2] % 2 == 0 {
                return Err(PirError::arg(format!("feature layer {depth} has shape {s:?}")));
            }
            if params.get(&format!("l{depth}.b")).map(|b| b.shape() != [s[0]]).unwrap_or(true) {
                return Err(PirError::arg(format!("feature layer {depth} lacks a matching bias")));
            }
            cin = s[0];
            depth += 1;
        }
        if depth == 0 {
            return Err(PirError::arg("feature stack needs at least layer l0"));
        }
        let mut kept = ParamSet::new();
        for i in 0..depth {
            for suffix in ["w", "b"] {
                let name = format!("l{i}.{suffix}");
                kept.insert(name.clone(), params.get(&name)?.clone());
            }
        }
        Ok(Self { params: kept, depth })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn cast<U: Float>(&self) -> FeatureStack<U> {
        FeatureStack {
            params: self.params.cast(),
            depth: self.depth,
        }
    }
}

impl<T: Float> PerceptualBackend<T> for FeatureStack<T> {
    fn features(&self, g: &mut Graph<T>, x: Var) -> Vec<Var> {
        let p = self.params.bind(g, false);
        let mut h = x;
        (0..self.depth)
            .map(|i| {
                h = conv(g, &p, &format!("l{i}"), h, if i == 0 { 1 } else { 2 });
                h = g.leaky_relu(h, 0.2);
                h
            })
            .collect()
    }
}

fn unit_channels<T: Float>(g: &mut Graph<T>, f: Var) -> Var {
    let sq = g.square(f);
    let ss = g.sum_axis(sq, 1);
    let ss = g.add_scalar(ss, NORM_EPS);
    let r = g.rsqrt(ss);
    g.mul(f, r)
}

/// Per-pair distances (N,) between two equally shaped image batches.
pub fn distance_var<T: Float>(
    g: &mut Graph<T>,
    backend: &dyn PerceptualBackend<T>,
    a: Var,
    b: Var,
) -> Var {
    let n = g.shape(a)[0];
    let fa = backend.features(g, a);
    let fb = backend.features(g, b);
    let mut total: Option<Var> = None;
    for (x, y) in fa.into_iter().zip(fb) {
        let nx = unit_channels(g, x);
        let ny = unit_channels(g, y);
        let d = g.sub(nx, ny);
        let d = g.square(d);
        let d = g.sum_axis(d, 1);
        let s = g.shape(d).to_vec();
        let d = g.reshape(d, &[n, s[2] * s[3]]);
        let d = g.mean_axis(d, 1);
        total = Some(match total {
            None => d,
            Some(t) => g.add(t, d),
        });
    }
    let total = total.expect("backend returned no feature layers");
    g.reshape(total, &[n])
}

/// Distance between `a[i]` and `b[i]` for every `i`.
pub fn perceptual_distance<T: Float>(
    backend: &dyn PerceptualBackend<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Vec<f64>> {
    if a.shape() != b.shape() || a.ndim() != 4 || a.dim(1) != CHANNELS {
        return Err(PirError::arg(format!(
            "perceptual distance needs two equally shaped image batches, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.dim(0);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + INFER_CHUNK).min(n);
        let mut g = Graph::new();
        let av = g.constant(a.slice_outer(start, end));
        let bv = g.constant(b.slice_outer(start, end));
        let d = distance_var(&mut g, backend, av, bv);
        out.extend(g.value(d).to_f64_vec());
        start = end;
    }
    Ok(out)
}

/// Channel-normalized features of a fixed image set, for many pairwise
/// distances without re-running the backend.
pub struct FeatureBank {
    /// Per image, per layer: (flattened normalized features, spatial size).
    items: Vec<Vec<(Vec<f64>, usize)>>,
}

impl FeatureBank {
    pub fn new<T: Float>(backend: &dyn PerceptualBackend<T>, images: &Tensor<T>) -> Result<Self> {
        if images.ndim() != 4 || images.dim(1) != CHANNELS {
            return Err(PirError::arg(format!("expected an image batch, got {:?}", images.shape())));
        }
        let n = images.dim(0);
        let mut items = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + INFER_CHUNK).min(n);
            let mut g = Graph::new();
            let x = g.constant(images.slice_outer(start, end));
            let feats: Vec<Var> = backend
                .features(&mut g, x)
                .into_iter()
                .map(|f| unit_channels(&mut g, f))
                .collect();
            for i in 0..end - start {
                items.push(
                    feats
                        .iter()
                        .map(|&f| {
                            let v = g.value(f);
                            let per = v.len() / v.dim(0);
                            let hw = v.dim(2) * v.dim(3);
                            (v.data()[i * per..(i + 1) * per].iter().map(|x| x.as_f64()).collect(), hw)
                        })
                        .collect(),
                );
            }
            start = end;
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.items[i]
            .iter()
            .zip(&self.items[j])
            .map(|((a, hw), (b, _))| {
                a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / *hw as f64
            })
            .sum()
    }

    /// Distance between item `i` here and item `j` of `other`.
    pub fn cross_distance(&self, i: usize, other: &FeatureBank, j: usize) -> f64 {
        self.items[i]
            .iter()
            .zip(&other.items[j])
            .map(|((a, hw), (b, _))| {
                a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / *hw as f64
            })
            .sum()
    }

    /// Mean distance over all unordered pairs; 0 for fewer than two items.
    pub fn mean_pairwise(&self) -> f64 {
        let n = self.len();
        if n < 2 {
            return 0.0;
        }
        let rows = par::map_range(n, |i| ((i + 1)..n).map(|j| self.distance(i, j)).sum::<f64>());
        rows.iter().sum::<f64>() / (n * (n - 1) / 2) as f64
    }
}
