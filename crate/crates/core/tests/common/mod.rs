//! Central-difference checks of the two reconstruction losses on miniature
//! f64 networks. Shared by the gradient tests and the acceptance run.

use pir_core::losses::{generator_recon_loss, translator_recon_loss, LossEval};
use pir_core::models::{clone_source_to_target, Generator, GeneratorArch};
use pir_core::perceptual::FeatureStack;
use pir_core::translator::{Translator, TranslatorArch};
use pir_core::{ParamSet, Tensor, TrainingConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Miniature {
    pub cfg: TrainingConfig,
    pub g_s: Generator<f64>,
    pub g_t: Generator<f64>,
    pub f: Translator<f64>,
    pub backend: FeatureStack<f64>,
    pub zs: Tensor<f64>,
}

impl Miniature {
    pub fn new(seed: u64) -> Self {
        let mut cfg = TrainingConfig::toy();
        cfg.resolution = 8;
        cfg.z_dim = 6;
        cfg.arch.w_dim = 8;
        cfg.arch.mapping_layers = 1;
        cfg.arch.gen_channels = vec![4, 4, 4];
        cfg.arch.content_channels = 4;
        cfg.arch.translator_channels = 2;
        cfg.arch.style_dim = 4;
        let g_s = Generator::<f64>::new(GeneratorArch::from_config(&cfg), seed).unwrap();
        // Perturbed so the pair differs and no loss term sits at its minimum.
        let mut g_t = clone_source_to_target(&g_s);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        for (_, t) in g_t.params.iter_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let f = Translator::<f64>::new(TranslatorArch::from_config(&cfg), seed + 1).unwrap();
        let backend = FeatureStack::<f64>::random(seed + 2);
        let zs = pir_core::image::sample_latent::<f64>(2, cfg.z_dim, seed + 3).unwrap();
        Self { cfg, g_s, g_t, f, backend, zs }
    }

    pub fn generator_loss(&self, g_t: &Generator<f64>) -> LossEval<f64> {
        generator_recon_loss(g_t, &self.g_s, &self.f, &self.zs, &self.cfg.loss, &self.backend, None).unwrap()
    }

    pub fn translator_loss(&self, f: &Translator<f64>) -> LossEval<f64> {
        translator_recon_loss(&self.g_t, &self.g_s, f, &self.zs, &self.backend).unwrap()
    }
}

/// Largest relative error over `coords` sampled coordinates with a
/// non-negligible analytic gradient.
pub fn max_relative_error(
    params: &ParamSet<f64>,
    loss: impl Fn(&ParamSet<f64>) -> LossEval<f64>,
    coords: usize,
    seed: u64,
) -> f64 {
    let analytic = loss(params).grads;
    let names: Vec<String> = params.names().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let (mut worst, mut checked, mut tries) = (0.0f64, 0, 0);
    while checked < coords {
        tries += 1;
        assert!(tries < 100 * coords, "too few coordinates with a usable gradient");
        let name = &names[rng.random_range(0..names.len())];
        let Some(grad) = analytic.get(name) else { continue };
        let idx = rng.random_range(0..grad.len());
        let ana = grad.data()[idx];
        if ana.abs() < 1e-7 {
            continue;
        }
        let shifted = |delta: f64| {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[idx] += delta;
            loss(&p).value
        };
        let num = (shifted(h) - shifted(-h)) / (2.0 * h);
        worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()));
        checked += 1;
    }
    worst
}

pub fn generator_recon_error(seed: u64, coords: usize) -> f64 {
    let m = Miniature::new(seed);
    max_relative_error(
        &m.g_t.params,
        |p| {
            let g = Generator::from_params(m.g_t.arch.clone(), p.clone()).unwrap();
            m.generator_loss(&g)
        },
        coords,
        seed,
    )
}

pub fn translator_recon_error(seed: u64, coords: usize) -> f64 {
    let m = Miniature::new(seed);
    max_relative_error(
        &m.f.params,
        |p| {
            let f = Translator::from_params(m.f.arch.clone(), p.clone()).unwrap();
            m.translator_loss(&f)
        },
        coords,
        seed,
    )
}
