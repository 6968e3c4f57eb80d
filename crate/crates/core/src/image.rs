//! Latent codes and image batches. Images are NCHW tensors with C = 3 and
//! values in [-1, 1]; latents are (N, z_dim) tensors.

use pir_tensor::{Float, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{PirError, Result};

pub const CHANNELS: usize = 3;

/// `n` standard-normal latent vectors; the batch is a pure function of `(n, z_dim, seed)`.
pub fn sample_latent<T: Float>(n: usize, z_dim: usize, seed: u64) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_latent_with(n, z_dim, &mut rng)
}

pub fn sample_latent_with<T: Float, R: rand::Rng + ?Sized>(
    n: usize,
    z_dim: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if n == 0 {
        return Err(PirError::arg("latent batch size must be >= 1"));
    }
    if z_dim == 0 {
        return Err(PirError::arg("z_dim is unset"));
    }
    let data = (0..n * z_dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::of(v)
        })
        .collect();
    Ok(Tensor::from_vec(&[n, z_dim], data)?)
}

pub(crate) fn check_latent<T: Float>(z: &Tensor<T>, z_dim: usize) -> Result<()> {
    if z.ndim() != 2 || z.dim(1) != z_dim || z.dim(0) == 0 {
        return Err(PirError::arg(format!(
            "latent batch must have shape (n >= 1, {z_dim}), got {:?}",
            z.shape()
        )));
    }
    Ok(())
}

/// Shape `(N >= 1, 3, resolution, resolution)` with finite entries.
pub fn check_images<T: Float>(x: &Tensor<T>, resolution: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[0] == 0 || s[1] != CHANNELS || s[2] != resolution || s[3] != resolution {
        return Err(PirError::arg(format!(
            "expected images of shape (n, 3, {resolution}, {resolution}), got {s:?}"
        )));
    }
    if !x.all_finite() {
        return Err(PirError::arg("image batch contains non-finite values"));
    }
    Ok(())
}

/// Run `f` over consecutive slices of at most `chunk` samples and concatenate.
pub(crate) fn map_batches<T: Float>(
    x: &Tensor<T>,
    chunk: usize,
    mut f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let n = x.dim(0);
    if n <= chunk {
        return f(x);
    }
    let mut parts = Vec::with_capacity(n.div_ceil(chunk));
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        parts.push(f(&x.slice_outer(start, end))?);
        start = end;
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Ok(Tensor::concat_outer(&refs)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_shape_and_determinism() {
        let a = sample_latent::<f32>(4, 128, 7).unwrap();
        let b = sample_latent::<f32>(4, 128, 7).unwrap();
        assert_eq!(a.shape(), &[4, 128]);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), sample_latent::<f32>(4, 128, 8).unwrap().checksum());
    }

    #[test]
    fn latent_moments() {
        let z = sample_latent::<f64>(10_000, 8, 1).unwrap();
        for c in 0..8 {
            let col: Vec<f64> = (0..10_000).map(|i| z.data()[i * 8 + c]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            assert!(m.abs() < 0.05, "coordinate {c} mean {m}");
            assert!(v > 0.9 && v < 1.1, "coordinate {c} variance {v}");
        }
    }

    #[test]
    fn latent_rejects_empty() {
        assert!(matches!(sample_latent::<f32>(0, 8, 0), Err(PirError::InvalidArgument(_))));
        assert!(matches!(sample_latent::<f32>(3, 0, 0), Err(PirError::InvalidArgument(_))));
    }

    #[test]
    fn image_checks() {
        let ok = Tensor::<f32>::zeros(&[2, 3, 8, 8]);
        assert!(check_images(&ok, 8).is_ok());
        assert!(check_images(&ok, 16).is_err());
        let mut bad = ok.clone();
        bad.data_mut()[5] = f32::NAN;
        assert!(check_images(&bad, 8).is_err());
    }
}
