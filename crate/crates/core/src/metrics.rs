//! Evaluation: Fréchet distance between feature Gaussians, intra-cluster
//! pairwise perceptual distance, and the balance index combining the two.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use pir_tensor::{par, Float, Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{PirError, Result};
use crate::models::INFER_CHUNK;
use crate::perceptual::{FeatureBank, FeatureStack, PerceptualBackend};

/// Eigenvalues of a covariance (or of the FID cross term) below
/// `-NEG_EIG_TOL * max(1, largest |eigenvalue|)` are a numerical error;
/// anything above is clipped to zero.
pub const NEG_EIG_TOL: f64 = 1e-6;

/// Maps an image batch to one feature row per image.
pub trait FeatureExtractor<T: Float> {
    /// (N, d) features in f64.
    fn extract(&self, images: &Tensor<T>) -> Result<Tensor<f64>>;
}

/// Every image flattened to one row.
pub struct FlattenExtractor;

impl<T: Float> FeatureExtractor<T> for FlattenExtractor {
    fn extract(&self, images: &Tensor<T>) -> Result<Tensor<f64>> {
        if images.ndim() < 2 {
            return Err(PirError::arg("need a batch with at least one feature axis"));
        }
        let n = images.dim(0);
        Ok(Tensor::from_vec(&[n, images.len() / n], images.to_f64_vec())?)
    }
}

/// Spatially pooled activations of every layer of a convolution stack,
/// concatenated. With random weights this is the deterministic projector;
/// with trained weights it is a backbone embedding.
pub struct PooledFeatures<T: Float> {
    pub stack: FeatureStack<T>,
}

impl<T: Float> FeatureExtractor<T> for PooledFeatures<T> {
    fn extract(&self, images: &Tensor<T>) -> Result<Tensor<f64>> {
        let n = images.dim(0);
        let mut rows: Vec<f64> = Vec::new();
        let mut width = 0;
        let mut start = 0;
        while start < n {
            let end = (start + INFER_CHUNK).min(n);
            let mut g = Graph::new();
            let x = g.constant(images.slice_outer(start, end));
            let feats = self.stack.features(&mut g, x);
            let pooled: Vec<Tensor<T>> = feats
                .into_iter()
                .map(|f| {
                    let m = g.spatial_mean(f);
                    g.value(m).clone()
                })
                .collect();
            width = pooled.iter().map(|p| p.dim(1)).sum();
            for i in 0..end - start {
                for p in &pooled {
                    let c = p.dim(1);
                    rows.extend(p.data()[i * c..(i + 1) * c].iter().map(|v| v.as_f64()));
                }
            }
            start = end;
        }
        Ok(Tensor::from_vec(&[n, width], rows)?)
    }
}

/// Sufficient statistics of a feature set: mean and unbiased covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub sample_count: usize,
}

impl FeatureGaussian {
    /// From an (N, d) feature table, N >= 2.
    pub fn from_features(f: &Tensor<f64>) -> Result<Self> {
        if f.ndim() != 2 || f.dim(0) < 2 {
            return Err(PirError::arg("feature statistics need at least 2 samples"));
        }
        let (n, d) = (f.dim(0), f.dim(1));
        let x = DMatrix::from_row_slice(n, d, f.data());
        let mean = x.row_mean().transpose();
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        symmetrize(&mut cov);
        Ok(Self {
            mean,
            cov,
            sample_count: n,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m = (&*m + t) * 0.5;
}

pub fn extract_feature_stats<T: Float>(
    images: &Tensor<T>,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<FeatureGaussian> {
    if images.ndim() == 0 || images.dim(0) < 2 {
        return Err(PirError::arg("feature statistics need at least 2 images"));
    }
    FeatureGaussian::from_features(&extractor.extract(images)?)
}

/// Eigenvalues clipped at zero after the tolerance check.
fn clipped_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut e = SymmetricEigen::new(m.clone());
    let scale = e.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in e.eigenvalues.iter_mut() {
        if !v.is_finite() || *v < -NEG_EIG_TOL * scale {
            return Err(PirError::Numerical(format!(
                "{what} has eigenvalue {v}, not positive semidefinite"
            )));
        }
        *v = v.max(0.0);
    }
    Ok(e)
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let e = clipped_eigen(m, what)?;
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    let mut r = &e.eigenvectors * s * e.eigenvectors.transpose();
    symmetrize(&mut r);
    Ok(r)
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, evaluated as
/// `Tr sqrt(sqrt(S_a) S_b sqrt(S_a))` so every square root is of a symmetric matrix.
pub fn fid(a: &FeatureGaussian, b: &FeatureGaussian) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.shape() != b.cov.shape() {
        return Err(PirError::arg(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if a.mean == b.mean && a.cov == b.cov {
        return Ok(0.0);
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let sa = psd_sqrt(&a.cov, "first covariance")?;
    let mut inner = &sa * &b.cov * &sa;
    symmetrize(&mut inner);
    let cross: f64 = clipped_eigen(&inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum();
    let value = diff + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(PirError::Numerical("non-finite FID".into()));
    }
    Ok(value.max(0.0))
}

/// Diversity within clusters formed around the training images.
#[derive(Clone, Debug, PartialEq)]
pub struct IntraCluster {
    pub mean: f64,
    /// Population standard deviation across non-singleton clusters.
    pub std: f64,
    /// Members of each training image's cluster.
    pub clusters: Vec<Vec<usize>>,
    /// Every generated sample landed in one cluster although k > 1.
    pub degenerate: bool,
}

/// Assign each of `n_gen` generated samples to its nearest of `k` training
/// samples under `to_anchor(gen, anchor)` (ties go to the lower anchor),
/// average `pairwise(gen_i, gen_j)` inside each cluster of two or more, and
/// summarize across clusters.
pub fn intra_cluster_distance<A, P>(n_gen: usize, k: usize, to_anchor: A, pairwise: P) -> Result<IntraCluster>
where
    A: Fn(usize, usize) -> f64 + Sync,
    P: Fn(usize, usize) -> f64 + Sync,
{
    if k == 0 {
        return Err(PirError::arg("need at least one training image"));
    }
    if n_gen < 2 * k {
        return Err(PirError::arg(format!("need at least {} generated samples, got {n_gen}", 2 * k)));
    }
    let assign = par::map_range(n_gen, |i| {
        let mut best = (f64::INFINITY, 0);
        for j in 0..k {
            let d = to_anchor(i, j);
            if d < best.0 {
                best = (d, j);
            }
        }
        best.1
    });
    let mut clusters = vec![Vec::new(); k];
    for (i, &c) in assign.iter().enumerate() {
        clusters[c].push(i);
    }
    let means: Vec<f64> = clusters
        .iter()
        .filter(|m| m.len() >= 2)
        .map(|m| {
            let rows = par::map_range(m.len(), |a| {
                ((a + 1)..m.len()).map(|b| pairwise(m[a], m[b])).sum::<f64>()
            });
            rows.iter().sum::<f64>() / (m.len() * (m.len() - 1) / 2) as f64
        })
        .collect();
    let c = means.len() as f64;
    let mean = means.iter().sum::<f64>() / c;
    let std = (means.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c).sqrt();
    let degenerate = k > 1 && clusters.iter().any(|m| m.len() == n_gen);
    if degenerate {
        log::warn!("all {n_gen} generated samples fell into one of {k} clusters");
    }
    Ok(IntraCluster {
        mean,
        std,
        clusters,
        degenerate,
    })
}

/// [`intra_cluster_distance`] with the perceptual distance of `backend`.
pub fn intra_cluster_perceptual<T: Float>(
    backend: &dyn PerceptualBackend<T>,
    generated: &Tensor<T>,
    training: &Tensor<T>,
) -> Result<IntraCluster> {
    let gen = FeatureBank::new(backend, generated)?;
    let train = FeatureBank::new(backend, training)?;
    intra_cluster_distance(
        gen.len(),
        train.len(),
        |i, j| gen.cross_distance(i, &train, j),
        |i, j| gen.distance(i, j),
    )
}

/// Default constant of [`balance_index`].
pub const BALANCE_CONSTANT: f64 = 1000.0;

/// `constant * ld / fid`.
pub fn balance_index(fid: f64, ld: f64, constant: f64) -> Result<f64> {
    if !(fid > 0.0 && fid.is_finite()) {
        return Err(PirError::arg(format!("balance index needs fid > 0, got {fid}")));
    }
    if !(ld >= 0.0 && ld.is_finite()) {
        return Err(PirError::arg(format!("balance index needs ld >= 0, got {ld}")));
    }
    Ok(constant * ld / fid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fid: f64,
    pub intra_cluster_mean: f64,
    pub intra_cluster_std: f64,
    pub balance: f64,
    pub sample_count: usize,
    pub degenerate_clusters: bool,
}

impl MetricsReport {
    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// One table row: `label | FID | LD mean (std) | balance`.
    pub fn row(&self, label: &str) -> String {
        format!(
            "{label:<24} | {:>9.3} | {:.4} ({:.4}) | {:>8.3}",
            self.fid, self.intra_cluster_mean, self.intra_cluster_std, self.balance
        )
    }
}

/// Full evaluation of `generated` against the reference `real` set and the
/// `training` images that seed the clusters.
pub fn evaluate<T: Float>(
    generated: &Tensor<T>,
    real: &Tensor<T>,
    training: &Tensor<T>,
    extractor: &dyn FeatureExtractor<T>,
    backend: &dyn PerceptualBackend<T>,
    balance_constant: f64,
) -> Result<MetricsReport> {
    let fg = extract_feature_stats(generated, extractor)?;
    let fr = extract_feature_stats(real, extractor)?;
    let fid_value = fid(&fg, &fr)?;
    let ic = intra_cluster_perceptual(backend, generated, training)?;
    let balance = if fid_value > 0.0 {
        balance_index(fid_value, ic.mean, balance_constant)?
    } else {
        log::warn!("FID is exactly zero; balance index reported as infinite");
        f64::INFINITY
    };
    Ok(MetricsReport {
        fid: fid_value,
        intra_cluster_mean: ic.mean,
        intra_cluster_std: ic.std,
        balance,
        sample_count: generated.dim(0),
        degenerate_clusters: ic.degenerate,
    })
}
