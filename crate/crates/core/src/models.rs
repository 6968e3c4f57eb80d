//! Style-based generator and the two-head discriminator.

use pir_tensor::{Bound, Float, Graph, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainingConfig;
use crate::error::{PirError, Result};
use crate::image::{check_images, check_latent, map_batches, sample_latent_with, CHANNELS};
use crate::nn::{check_layout, conv, conv_weight, dense, init_conv, init_dense, lrelu_gain, pixel_norm};

/// Samples per graph when running inference over large batches.
pub(crate) const INFER_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorArch {
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    pub mapping_lr_mul: f64,
    /// Synthesis widths, coarsest first; every block after the first doubles resolution.
    pub channels: Vec<usize>,
    pub resolution: usize,
    pub noise_seed: u64,
}

impl GeneratorArch {
    pub fn from_config(cfg: &TrainingConfig) -> Self {
        Self {
            z_dim: cfg.z_dim,
            w_dim: cfg.arch.w_dim,
            mapping_layers: cfg.arch.mapping_layers,
            mapping_lr_mul: cfg.arch.mapping_lr_mul,
            channels: cfg.arch.gen_channels.clone(),
            resolution: cfg.resolution,
            noise_seed: cfg.arch.noise_seed,
        }
    }

    fn base_resolution(&self) -> usize {
        self.resolution >> (self.channels.len() - 1)
    }

    fn block_resolution(&self, i: usize) -> usize {
        self.base_resolution() << i
    }

    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.z_dim == 0 || self.w_dim == 0 || self.mapping_layers == 0
        {
            return Err(PirError::config("generator needs z_dim, w_dim, mapping layers and blocks"));
        }
        let up = self.channels.len() - 1;
        if !self.resolution.is_multiple_of(1 << up) || self.base_resolution() < 2 {
            return Err(PirError::config(format!(
                "resolution {} cannot host {} synthesis blocks",
                self.resolution,
                self.channels.len()
            )));
        }
        Ok(())
    }
}

/// Generator parameters plus the fixed synthesis noise they were built with.
#[derive(Clone, Debug)]
pub struct Generator<T: Float> {
    pub arch: GeneratorArch,
    pub params: ParamSet<T>,
    noise: Vec<Tensor<T>>,
}

impl<T: Float> Generator<T> {
    pub fn new(arch: GeneratorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        for i in 0..arch.mapping_layers {
            let fan_in = if i == 0 { arch.z_dim } else { arch.w_dim };
            init_dense(&mut ps, &mut rng, &format!("map{i}"), fan_in, arch.w_dim, arch.mapping_lr_mul, 0.0);
        }
        let base = arch.base_resolution();
        ps.insert("const", Tensor::randn(&[1, arch.channels[0], base, base], 1.0, &mut rng));
        let mut cin = arch.channels[0];
        for (i, &c) in arch.channels.iter().enumerate() {
            init_dense(&mut ps, &mut rng, &format!("b{i}.affine"), arch.w_dim, cin, 1.0, 1.0);
            init_conv(&mut ps, &mut rng, &format!("b{i}.conv"), cin, c, 3, false);
            ps.insert(format!("b{i}.bias"), Tensor::zeros(&[1, c, 1, 1]));
            ps.insert(format!("b{i}.noise_strength"), Tensor::zeros(&[1]));
            init_dense(&mut ps, &mut rng, &format!("b{i}.rgb_affine"), arch.w_dim, c, 1.0, 1.0);
            init_conv(&mut ps, &mut rng, &format!("b{i}.rgb"), c, CHANNELS, 1, false);
            ps.insert(format!("b{i}.rgb_bias"), Tensor::zeros(&[1, CHANNELS, 1, 1]));
            cin = c;
        }
        let noise = Self::fixed_noise(&arch);
        Ok(Self { arch, params: ps, noise })
    }

    fn fixed_noise(arch: &GeneratorArch) -> Vec<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(arch.noise_seed);
        (0..arch.channels.len())
            .map(|i| {
                let r = arch.block_resolution(i);
                Tensor::<f64>::randn(&[1, 1, r, r], 1.0, &mut rng).cast()
            })
            .collect()
    }

    /// Rebuild from stored parameters; the noise is regenerated from the seed.
    pub fn from_params(arch: GeneratorArch, params: ParamSet<T>) -> Result<Self> {
        let reference = Self::new(arch.clone(), 0)?;
        check_layout(&reference.params, &params, "generator")?;
        Ok(Self { noise: reference.noise, arch, params })
    }

    pub fn cast<U: Float>(&self) -> Generator<U> {
        Generator {
            arch: self.arch.clone(),
            params: self.params.cast(),
            noise: self.noise.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Images for the latent batch `z` (N, z_dim), drawn on `g` with parameters `p`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Var {
        let a = &self.arch;
        let mut w = pixel_norm(g, z);
        for i in 0..a.mapping_layers {
            let h = dense(g, p, &format!("map{i}"), w, a.mapping_lr_mul);
            w = lrelu_gain(g, h);
        }
        let mut x = p.var("const");
        let mut rgb: Option<Var> = None;
        for i in 0..a.channels.len() {
            if i > 0 {
                x = g.upsample2x(x);
            }
            x = modulated_conv(g, p, &format!("b{i}.affine"), &format!("b{i}.conv"), x, w, true);
            let noise = g.constant(self.noise[i].clone());
            let noise = g.mul(noise, p.var(&format!("b{i}.noise_strength")));
            x = g.add(x, noise);
            x = g.add(x, p.var(&format!("b{i}.bias")));
            x = lrelu_gain(g, x);
            let y = modulated_conv(g, p, &format!("b{i}.rgb_affine"), &format!("b{i}.rgb"), x, w, false);
            let y = g.add(y, p.var(&format!("b{i}.rgb_bias")));
            rgb = Some(match rgb {
                None => y,
                Some(r) => {
                    let up = g.upsample2x(r);
                    g.add(up, y)
                }
            });
        }
        g.tanh(rgb.expect("at least one synthesis block"))
    }

    /// Pure inference: same `(self, z)` always yields the same images.
    pub fn generate(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        check_latent(z, self.arch.z_dim)?;
        map_batches(z, INFER_CHUNK, |zc| {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let zv = g.constant(zc.clone());
            let out = self.forward(&mut g, &p, zv);
            Ok(g.value(out).clone())
        })
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = sample_latent_with(n, self.arch.z_dim, &mut rng)?;
        self.generate(&z)
    }
}

/// Modulated convolution: scale input channels by the style, convolve with the
/// shared kernel, then (optionally) rescale each output channel so the
/// effective per-sample kernel has unit norm.
fn modulated_conv<T: Float>(
    g: &mut Graph<T>,
    p: &Bound,
    affine: &str,
    kernel: &str,
    x: Var,
    w_lat: Var,
    demodulate: bool,
) -> Var {
    let s = dense(g, p, affine, w_lat, 1.0);
    let (n, cin) = (g.shape(s)[0], g.shape(s)[1]);
    let s4 = g.reshape(s, &[n, cin, 1, 1]);
    let xs = g.mul(x, s4);
    let weight = conv_weight(g, p, kernel);
    let ws = g.shape(weight).to_vec();
    let y = g.conv2d(xs, weight, None, 1, ws[2] / 2);
    if !demodulate {
        return y;
    }
    let w2 = g.square(weight);
    let w2 = g.reshape(w2, &[ws[0], ws[1], ws[2] * ws[3]]);
    let w2 = g.sum_axis(w2, 2);
    let w2 = g.reshape(w2, &[ws[0], ws[1]]);
    let s2 = g.square(s);
    let d = g.linear(s2, w2, None);
    let d = g.add_scalar(d, 1e-8);
    let d = g.rsqrt(d);
    let d = g.reshape(d, &[n, ws[0], 1, 1]);
    g.mul(y, d)
}

/// Deep copy of the source generator; the two never share storage.
pub fn clone_source_to_target<T: Float>(g_s: &Generator<T>) -> Generator<T> {
    g_s.clone()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorArch {
    /// fromRGB width followed by the three stride-2 stages.
    pub channels: [usize; 4],
    pub resolution: usize,
}

impl DiscriminatorArch {
    pub fn from_config(cfg: &TrainingConfig) -> Self {
        let c = &cfg.arch.disc_channels;
        Self {
            channels: [c[0], c[1], c[2], c[3]],
            resolution: cfg.resolution,
        }
    }

    /// Spatial extent of the patch-logit map.
    pub fn patch_resolution(&self) -> usize {
        self.resolution / 4
    }
}

/// Logits of one discriminator pass.
pub struct DiscOut {
    /// (N,)
    pub image: Var,
    /// (N, 1, R/4, R/4)
    pub patch: Var,
}

#[derive(Clone, Debug)]
pub struct Discriminator<T: Float> {
    pub arch: DiscriminatorArch,
    pub params: ParamSet<T>,
}

impl<T: Float> Discriminator<T> {
    pub fn new(arch: DiscriminatorArch, seed: u64) -> Result<Self> {
        if arch.resolution < 8 || !arch.resolution.is_multiple_of(8) {
            return Err(PirError::config("discriminator resolution must be a multiple of 8"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let c = arch.channels;
        init_conv(&mut ps, &mut rng, "from_rgb", CHANNELS, c[0], 1, true);
        init_conv(&mut ps, &mut rng, "down1", c[0], c[1], 3, true);
        init_conv(&mut ps, &mut rng, "down2", c[1], c[2], 3, true);
        init_conv(&mut ps, &mut rng, "patch", c[2], 1, 1, true);
        init_conv(&mut ps, &mut rng, "down3", c[2], c[3], 3, true);
        let r8 = arch.resolution / 8;
        init_dense(&mut ps, &mut rng, "fc", c[3] * r8 * r8, c[3], 1.0, 0.0);
        ps.insert("mbstd", Tensor::randn(&[c[3]], 1.0, &mut rng));
        init_dense(&mut ps, &mut rng, "out", c[3], 1, 1.0, 0.0);
        Ok(Self { arch, params: ps })
    }

    pub fn from_params(arch: DiscriminatorArch, params: ParamSet<T>) -> Result<Self> {
        check_layout(&Self::new(arch.clone(), 0)?.params, &params, "discriminator")?;
        Ok(Self { arch, params })
    }

    pub fn cast<U: Float>(&self) -> Discriminator<U> {
        Discriminator {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    /// Downsampling convolves at full resolution and then average-pools;
    /// strided convolutions alias and let the generator win with
    /// high-frequency patterns.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> DiscOut {
        let h = conv(g, p, "from_rgb", x, 1);
        let mut h = lrelu_gain(g, h);
        let mut patch = None;
        for name in ["down1", "down2", "down3"] {
            let c = conv(g, p, name, h, 1);
            let c = lrelu_gain(g, c);
            h = g.avgpool2x(c);
            if name == "down2" {
                patch = Some(conv(g, p, "patch", h, 1));
            }
        }
        let patch = patch.expect("patch head after the second downsampling");
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, &[s[0], s[1] * s[2] * s[3]]);
        let f = dense(g, p, "fc", flat, 1.0);
        // Feature spread across the batch, so a generator that emits one
        // image for every latent is visible to the image head.
        let spread = batch_spread(g, flat);
        let spread = g.mul(p.var("mbstd"), spread);
        let f = g.add(f, spread);
        let f = lrelu_gain(g, f);
        let o = dense(g, p, "out", f, 1.0);
        let image = g.reshape(o, &[s[0]]);
        DiscOut { image, patch }
    }
}

/// Mean over features of the across-batch standard deviation, as a 0-d value.
fn batch_spread<T: Float>(g: &mut Graph<T>, flat: Var) -> Var {
    let mu = g.mean_axis(flat, 0);
    let d = g.sub(flat, mu);
    let d = g.square(d);
    let var = g.mean_axis(d, 0);
    let var = g.add_scalar(var, 1e-8);
    let sd = g.sqrt(var);
    g.mean_all(sd)
}

/// Image logits (N,) and patch logits (N, 1, R/4, R/4) for a batch.
pub fn discriminate<T: Float>(d: &Discriminator<T>, imgs: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    check_images(imgs, d.arch.resolution)?;
    let mut g = Graph::new();
    let p = d.params.bind(&mut g, false);
    let x = g.constant(imgs.clone());
    let out = d.forward(&mut g, &p, x);
    Ok((g.value(out.image).clone(), g.value(out.patch).clone()))
}
