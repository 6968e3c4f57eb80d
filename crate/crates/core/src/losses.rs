//! Training objectives: two-head logistic adversarial losses and the paired
//! reconstruction losses for the target generator and the translator.

use std::collections::HashMap;

use pir_tensor::{Bound, Float, Graph, ParamGrads, Tensor, Var};

use crate::config::{LossConfig, ReconDirection, ReconMetric};
use crate::error::{PirError, Result};
use crate::image::check_images;
use crate::models::{DiscOut, Discriminator, Generator};
use crate::perceptual::{distance_var, PerceptualBackend};
use crate::translator::{StyleVars, Translator};

fn mean_softplus<T: Float>(g: &mut Graph<T>, x: Var, negate: bool) -> Var {
    let x = if negate { g.neg(x) } else { x };
    let s = g.softplus(x);
    g.mean_all(s)
}

fn blend<T: Float>(g: &mut Graph<T>, image: Var, patch: Var, patch_weight: f64) -> Var {
    let a = g.mul_scalar(image, 1.0 - patch_weight);
    let b = g.mul_scalar(patch, patch_weight);
    g.add(a, b)
}

/// `softplus(-real) + softplus(fake)` per head, each head averaged over its
/// logits, heads mixed by `patch_weight`.
pub fn d_loss_var<T: Float>(g: &mut Graph<T>, real: &DiscOut, fake: &DiscOut, patch_weight: f64) -> Var {
    let ri = mean_softplus(g, real.image, true);
    let fi = mean_softplus(g, fake.image, false);
    let img = g.add(ri, fi);
    let rp = mean_softplus(g, real.patch, true);
    let fp = mean_softplus(g, fake.patch, false);
    let patch = g.add(rp, fp);
    blend(g, img, patch, patch_weight)
}

/// Non-saturating generator loss `softplus(-fake)` on both heads.
pub fn g_loss_var<T: Float>(g: &mut Graph<T>, fake: &DiscOut, patch_weight: f64) -> Var {
    let img = mean_softplus(g, fake.image, true);
    let patch = mean_softplus(g, fake.patch, true);
    blend(g, img, patch, patch_weight)
}

pub fn adversarial_d_loss<T: Float>(
    d: &Discriminator<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    patch_weight: f64,
) -> Result<f64> {
    check_images(real, d.arch.resolution)?;
    check_images(fake, d.arch.resolution)?;
    let mut g = Graph::new();
    let p = d.params.bind(&mut g, false);
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let ro = d.forward(&mut g, &p, r);
    let fo = d.forward(&mut g, &p, f);
    let l = d_loss_var(&mut g, &ro, &fo, patch_weight);
    Ok(g.value(l).item().as_f64())
}

pub fn adversarial_g_loss<T: Float>(d: &Discriminator<T>, fake: &Tensor<T>, patch_weight: f64) -> Result<f64> {
    check_images(fake, d.arch.resolution)?;
    let mut g = Graph::new();
    let p = d.params.bind(&mut g, false);
    let f = g.constant(fake.clone());
    let fo = d.forward(&mut g, &p, f);
    let l = g_loss_var(&mut g, &fo, patch_weight);
    Ok(g.value(l).item().as_f64())
}

/// A translation network as seen by the reconstruction losses.
pub trait ImageTranslator<T: Float> {
    /// Image with the content of `content` and the style of `style`.
    fn translate(&self, g: &mut Graph<T>, content: Var, style: Var) -> Var;

    /// Translations of several pairs; implementations may share encoder work.
    fn translate_pairs(&self, g: &mut Graph<T>, pairs: &[(Var, Var)]) -> Vec<Var> {
        pairs.iter().map(|&(c, s)| self.translate(g, c, s)).collect()
    }

    fn content_code(&self, _g: &mut Graph<T>, _x: Var) -> Option<Var> {
        None
    }

    fn style_code(&self, _g: &mut Graph<T>, _x: Var) -> Option<StyleVars> {
        None
    }
}

/// A [`Translator`] whose parameters are bound to a graph.
pub struct BoundTranslator<'a, T: Float> {
    pub net: &'a Translator<T>,
    pub params: Bound,
}

impl<'a, T: Float> BoundTranslator<'a, T> {
    pub fn new(net: &'a Translator<T>, g: &mut Graph<T>, trainable: bool) -> Self {
        Self {
            net,
            params: net.params.bind(g, trainable),
        }
    }
}

impl<T: Float> ImageTranslator<T> for BoundTranslator<'_, T> {
    fn translate(&self, g: &mut Graph<T>, content: Var, style: Var) -> Var {
        self.net.translate_var(g, &self.params, content, style)
    }

    fn translate_pairs(&self, g: &mut Graph<T>, pairs: &[(Var, Var)]) -> Vec<Var> {
        let mut contents: HashMap<usize, Var> = HashMap::new();
        let mut styles: HashMap<usize, StyleVars> = HashMap::new();
        pairs
            .iter()
            .map(|&(c, s)| {
                let cc = match contents.get(&c.index()) {
                    Some(&v) => v,
                    None => {
                        let v = self.net.content_var(g, &self.params, c);
                        contents.insert(c.index(), v);
                        v
                    }
                };
                styles
                    .entry(s.index())
                    .or_insert_with(|| self.net.style_var(g, &self.params, s));
                self.net.decode_var(g, &self.params, cc, &styles[&s.index()])
            })
            .collect()
    }

    fn content_code(&self, g: &mut Graph<T>, x: Var) -> Option<Var> {
        Some(self.net.content_var(g, &self.params, x))
    }

    fn style_code(&self, g: &mut Graph<T>, x: Var) -> Option<StyleVars> {
        Some(self.net.style_var(g, &self.params, x))
    }
}

/// What a reconstruction distance may need besides the images.
pub struct ReconContext<'a, T: Float> {
    pub backend: &'a dyn PerceptualBackend<T>,
    /// Required by [`ReconMetric::Adversarial`]: the discriminator and its bound parameters.
    pub disc: Option<(&'a Discriminator<T>, &'a Bound)>,
    pub patch_weight: f64,
}

fn mean_abs_diff<T: Float>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean_all(d)
}

/// Batch-mean distance between the translation `recon = F(content, style)`
/// and its style input, under `metric`.
#[allow(clippy::too_many_arguments)]
pub fn recon_term<T: Float>(
    g: &mut Graph<T>,
    metric: ReconMetric,
    f: &dyn ImageTranslator<T>,
    ctx: &ReconContext<'_, T>,
    recon: Var,
    content: Var,
    style: Var,
) -> Result<Var> {
    match metric {
        ReconMetric::L1 => Ok(mean_abs_diff(g, recon, style)),
        ReconMetric::Perceptual => {
            let d = distance_var(g, ctx.backend, recon, style);
            Ok(g.mean_all(d))
        }
        ReconMetric::CodeL1 => {
            let missing = || PirError::config("code_l1 needs a translator exposing its codes");
            let cr = f.content_code(g, recon).ok_or_else(missing)?;
            let cc = f.content_code(g, content).ok_or_else(missing)?;
            let sr = f.style_code(g, recon).ok_or_else(missing)?;
            let ss = f.style_code(g, style).ok_or_else(missing)?;
            let mut total = mean_abs_diff(g, cr, cc);
            let scale = 0.5 / sr.layers.len() as f64;
            for (&(m0, s0), &(m1, s1)) in sr.layers.iter().zip(&ss.layers) {
                let dm = mean_abs_diff(g, m0, m1);
                let ds = mean_abs_diff(g, s0, s1);
                let both = g.add(dm, ds);
                let both = g.mul_scalar(both, scale);
                total = g.add(total, both);
            }
            Ok(total)
        }
        ReconMetric::Adversarial => {
            let (d, p) = ctx
                .disc
                .ok_or_else(|| PirError::config("the adversarial reconstruction metric needs a discriminator"))?;
            let out = d.forward(g, p, recon);
            Ok(g_loss_var(g, &out, ctx.patch_weight))
        }
    }
}

/// Generator-side paired reconstruction for one image pair batch.
///
/// The source term rebuilds `x_s` from the content of `x_t`; the target term
/// rebuilds `x_t` from the content of `x_s`. `direction` picks which terms
/// are summed.
pub fn paired_recon<T: Float>(
    g: &mut Graph<T>,
    f: &dyn ImageTranslator<T>,
    ctx: &ReconContext<'_, T>,
    x_s: Var,
    x_t: Var,
    metric: ReconMetric,
    direction: ReconDirection,
) -> Result<Var> {
    let mut pairs = Vec::with_capacity(2);
    if direction != ReconDirection::TargetOnly {
        pairs.push((x_t, x_s));
    }
    if direction != ReconDirection::SourceOnly {
        pairs.push((x_s, x_t));
    }
    let recons = f.translate_pairs(g, &pairs);
    let mut total: Option<Var> = None;
    for (&(c, s), r) in pairs.iter().zip(recons) {
        let t = recon_term(g, metric, f, ctx, r, c, s)?;
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t),
        });
    }
    Ok(total.expect("at least one direction"))
}

/// The translator objective: both cross reconstructions plus both self
/// reconstructions, each under the perceptual distance.
pub fn translator_recon<T: Float>(
    g: &mut Graph<T>,
    f: &dyn ImageTranslator<T>,
    backend: &dyn PerceptualBackend<T>,
    x_s: Var,
    x_t: Var,
) -> Var {
    let pairs = [(x_t, x_s), (x_s, x_t), (x_s, x_s), (x_t, x_t)];
    let recons = f.translate_pairs(g, &pairs);
    let mut total: Option<Var> = None;
    for (&(_, s), r) in pairs.iter().zip(recons) {
        let d = distance_var(g, backend, r, s);
        let t = g.mean_all(d);
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t),
        });
    }
    total.expect("four terms")
}

/// Value of a loss and the gradients of the one module it trains, keyed by
/// that module's own parameter names.
#[derive(Clone, Debug)]
pub struct LossEval<T> {
    pub value: f64,
    pub grads: ParamGrads<T>,
}

/// Generator reconstruction loss over the latent batch `zs`.
///
/// Only `g_t` receives gradients; `g_s`, `f` and the discriminator enter the
/// graph as constants.
pub fn generator_recon_loss<T: Float>(
    g_t: &Generator<T>,
    g_s: &Generator<T>,
    f: &Translator<T>,
    zs: &Tensor<T>,
    cfg: &LossConfig,
    backend: &dyn PerceptualBackend<T>,
    disc: Option<&Discriminator<T>>,
) -> Result<LossEval<T>> {
    if zs.ndim() != 2 || zs.dim(0) == 0 {
        return Err(PirError::arg("latent batch must be non-empty"));
    }
    if cfg.recon_metric == ReconMetric::Adversarial && disc.is_none() {
        return Err(PirError::config("the adversarial reconstruction metric needs a discriminator"));
    }
    let mut g = Graph::new();
    let pt = g_t.params.bind(&mut g, true);
    let ps = g_s.params.bind(&mut g, false);
    let bf = BoundTranslator::new(f, &mut g, false);
    let dp = disc.map(|d| (d, d.params.bind(&mut g, false)));
    let z = g.constant(zs.clone());
    let x_t = g_t.forward(&mut g, &pt, z);
    let x_s = g_s.forward(&mut g, &ps, z);
    let ctx = ReconContext {
        backend,
        disc: dp.as_ref().map(|(d, p)| (*d, p)),
        patch_weight: cfg.patch_weight,
    };
    let loss = paired_recon(&mut g, &bf, &ctx, x_s, x_t, cfg.recon_metric, cfg.recon_direction)?;
    let value = g.value(loss).item().as_f64();
    let mut grads = g.backward(loss);
    Ok(LossEval {
        value,
        grads: pt.grads(&mut grads),
    })
}

/// Translator reconstruction loss over `zs`; only `f` receives gradients.
pub fn translator_recon_loss<T: Float>(
    g_t: &Generator<T>,
    g_s: &Generator<T>,
    f: &Translator<T>,
    zs: &Tensor<T>,
    backend: &dyn PerceptualBackend<T>,
) -> Result<LossEval<T>> {
    if zs.ndim() != 2 || zs.dim(0) == 0 {
        return Err(PirError::arg("latent batch must be non-empty"));
    }
    let x_t = g_t.generate(zs)?;
    let x_s = g_s.generate(zs)?;
    translator_recon_on(f, &x_s, &x_t, backend)
}

/// [`translator_recon_loss`] on precomputed image pairs.
pub fn translator_recon_on<T: Float>(
    f: &Translator<T>,
    x_s: &Tensor<T>,
    x_t: &Tensor<T>,
    backend: &dyn PerceptualBackend<T>,
) -> Result<LossEval<T>> {
    check_images(x_s, f.arch.resolution)?;
    check_images(x_t, f.arch.resolution)?;
    let mut g = Graph::new();
    let bf = BoundTranslator::new(f, &mut g, true);
    let xs = g.constant(x_s.clone());
    let xt = g.constant(x_t.clone());
    let loss = translator_recon(&mut g, &bf, backend, xs, xt);
    let value = g.value(loss).item().as_f64();
    let mut grads = g.backward(loss);
    Ok(LossEval {
        value,
        grads: bf.params.grads(&mut grads),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainingConfig;
    use crate::models::{discriminate, DiscriminatorArch};
    use crate::perceptual::FeatureStack;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn softplus(x: f64) -> f64 {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn logits(g: &mut Graph<f64>, image: Vec<f64>, patch: Vec<f64>, n: usize, side: usize) -> DiscOut {
        DiscOut {
            image: g.constant(Tensor::from_vec(&[n], image).unwrap()),
            patch: g.constant(Tensor::from_vec(&[n, 1, side, side], patch).unwrap()),
        }
    }

    #[test]
    fn zero_logits() {
        let ln2 = std::f64::consts::LN_2;
        for pw in [0.0, 0.3, 1.0] {
            let mut g = Graph::new();
            let r = logits(&mut g, vec![0.0; 2], vec![0.0; 8], 2, 2);
            let f = logits(&mut g, vec![0.0; 2], vec![0.0; 8], 2, 2);
            let d = d_loss_var(&mut g, &r, &f, pw);
            let gl = g_loss_var(&mut g, &f, pw);
            assert!((g.value(d).item() - 2.0 * ln2).abs() < 1e-12);
            assert!((g.value(gl).item() - ln2).abs() < 1e-12);
        }
    }

    #[test]
    fn asymptotes() {
        let mut g = Graph::new();
        let r = logits(&mut g, vec![60.0; 2], vec![60.0; 8], 2, 2);
        let f = logits(&mut g, vec![-60.0; 2], vec![-60.0; 8], 2, 2);
        let d = d_loss_var(&mut g, &r, &f, 0.5);
        assert!(g.value(d).item() < 1e-20);
        let fake_wins = logits(&mut g, vec![60.0; 2], vec![60.0; 8], 2, 2);
        let gl = g_loss_var(&mut g, &fake_wins, 0.5);
        assert!(g.value(gl).item() < 1e-20);
    }

    #[test]
    fn scalar_oracle_on_random_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (n, side) = (4, 3);
            let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.random_range(-4.0..4.0)).collect() };
            let (ri, rp, fi, fp) = (draw(n), draw(n * side * side), draw(n), draw(n * side * side));
            let pw = 0.37;
            let mut g = Graph::new();
            let r = logits(&mut g, ri.clone(), rp.clone(), n, side);
            let f = logits(&mut g, fi.clone(), fp.clone(), n, side);
            let d = d_loss_var(&mut g, &r, &f, pw);
            let gl = g_loss_var(&mut g, &f, pw);
            let sp = |v: &[f64], sign: f64| mean(&v.iter().map(|&x| softplus(sign * x)).collect::<Vec<_>>());
            let d_expect = (1.0 - pw) * (sp(&ri, -1.0) + sp(&fi, 1.0)) + pw * (sp(&rp, -1.0) + sp(&fp, 1.0));
            let g_expect = (1.0 - pw) * sp(&fi, -1.0) + pw * sp(&fp, -1.0);
            assert!((g.value(d).item() - d_expect).abs() < 1e-6);
            assert!((g.value(gl).item() - g_expect).abs() < 1e-6);
        }
    }

    #[test]
    fn network_losses_match_oracle_on_discriminator_outputs() {
        let d = Discriminator::<f64>::new(DiscriminatorArch { channels: [4, 4, 4, 4], resolution: 8 }, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let real = Tensor::<f64>::randn(&[4, 3, 8, 8], 0.5, &mut rng);
        let fake = Tensor::<f64>::randn(&[4, 3, 8, 8], 0.5, &mut rng);
        let (ri, rp) = discriminate(&d, &real).unwrap();
        let (fi, fp) = discriminate(&d, &fake).unwrap();
        let sp = |t: &Tensor<f64>, sign: f64| mean(&t.data().iter().map(|&x| softplus(sign * x)).collect::<Vec<_>>());
        let pw = 0.5;
        let expect = (1.0 - pw) * (sp(&ri, -1.0) + sp(&fi, 1.0)) + pw * (sp(&rp, -1.0) + sp(&fp, 1.0));
        assert!((adversarial_d_loss(&d, &real, &fake, pw).unwrap() - expect).abs() < 1e-6);
        let expect_g = (1.0 - pw) * sp(&fi, -1.0) + pw * sp(&fp, -1.0);
        assert!((adversarial_g_loss(&d, &fake, pw).unwrap() - expect_g).abs() < 1e-6);
        assert!(adversarial_d_loss(&d, &real.slice_outer(0, 0), &fake, pw).is_err());
    }

    /// Returns its style input: a perfect self-reconstructor.
    struct StyleCopy;

    impl<T: Float> ImageTranslator<T> for StyleCopy {
        fn translate(&self, _g: &mut Graph<T>, _content: Var, style: Var) -> Var {
            style
        }
    }

    /// `F(c, s) = (c + s) / 2`, small enough to check by hand.
    struct Average;

    impl<T: Float> ImageTranslator<T> for Average {
        fn translate(&self, g: &mut Graph<T>, content: Var, style: Var) -> Var {
            let s = g.add(content, style);
            g.mul_scalar(s, 0.5)
        }
    }

    #[test]
    fn perfect_translator_gives_zero() {
        let backend = FeatureStack::<f64>::random(1);
        let ctx = ReconContext { backend: &backend, disc: None, patch_weight: 0.5 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let xs = g.constant(Tensor::randn(&[2, 3, 8, 8], 0.5, &mut rng));
        let xt = g.constant(Tensor::randn(&[2, 3, 8, 8], 0.5, &mut rng));
        for metric in [ReconMetric::L1, ReconMetric::Perceptual] {
            let l = paired_recon(&mut g, &StyleCopy, &ctx, xs, xt, metric, ReconDirection::Both).unwrap();
            assert_eq!(g.value(l).item(), 0.0);
        }
        let l = translator_recon(&mut g, &StyleCopy, &backend, xs, xt);
        assert_eq!(g.value(l).item(), 0.0);
        let l = paired_recon(&mut g, &StyleCopy, &ctx, xs, xt, ReconMetric::CodeL1, ReconDirection::Both);
        assert!(matches!(l, Err(PirError::InvalidConfig(_))));
        let l = paired_recon(&mut g, &StyleCopy, &ctx, xs, xt, ReconMetric::Adversarial, ReconDirection::Both);
        assert!(matches!(l, Err(PirError::InvalidConfig(_))));
    }

    #[test]
    fn l1_hand_computed() {
        // One 2x2 single-value-per-channel pair: x_s = 1, x_t = -1 everywhere
        // except one pixel. F averages, so each term is |(c - s) / 2| averaged.
        let backend = FeatureStack::<f64>::random(1);
        let ctx = ReconContext { backend: &backend, disc: None, patch_weight: 0.5 };
        let mut xs = vec![1.0; 12];
        xs[0] = 3.0;
        let xt = vec![-1.0; 12];
        let expect_one: f64 = xs.iter().zip(&xt).map(|(s, t)| ((s - t) / 2.0f64).abs()).sum::<f64>() / 12.0;
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_vec(&[1, 3, 2, 2], xs).unwrap());
        let t = g.constant(Tensor::from_vec(&[1, 3, 2, 2], xt).unwrap());
        let both = paired_recon(&mut g, &Average, &ctx, s, t, ReconMetric::L1, ReconDirection::Both).unwrap();
        let src = paired_recon(&mut g, &Average, &ctx, s, t, ReconMetric::L1, ReconDirection::SourceOnly).unwrap();
        assert!((g.value(both).item() - 2.0 * expect_one).abs() < 1e-12);
        assert!((g.value(src).item() - expect_one).abs() < 1e-12);
    }

    fn tiny_cfg() -> TrainingConfig {
        let mut cfg = TrainingConfig::toy();
        cfg.resolution = 8;
        cfg.z_dim = 6;
        cfg.arch.w_dim = 8;
        cfg.arch.mapping_layers = 1;
        cfg.arch.gen_channels = vec![4, 4, 4];
        cfg.arch.content_channels = 4;
        cfg.arch.translator_channels = 2;
        cfg.arch.style_dim = 4;
        cfg
    }

    #[test]
    fn recon_losses_touch_only_their_module() {
        use crate::models::{clone_source_to_target, GeneratorArch};
        use crate::translator::TranslatorArch;
        let cfg = tiny_cfg();
        let g_s = Generator::<f64>::new(GeneratorArch::from_config(&cfg), 1).unwrap();
        let mut g_t = clone_source_to_target(&g_s);
        for (_, t) in g_t.params.iter_mut() {
            *t = t.map(|v| v * 1.1 + 0.01);
        }
        let f = Translator::<f64>::new(TranslatorArch::from_config(&cfg), 2).unwrap();
        let backend = FeatureStack::<f64>::random(3);
        let zs = crate::image::sample_latent::<f64>(2, cfg.z_dim, 4).unwrap();
        let gen = generator_recon_loss(&g_t, &g_s, &f, &zs, &cfg.loss, &backend, None).unwrap();
        assert!(gen.value > 0.0 && gen.value.is_finite());
        assert_eq!(gen.grads.keys().collect::<Vec<_>>(), g_t.params.names().collect::<Vec<_>>());
        let tr = translator_recon_loss(&g_t, &g_s, &f, &zs, &backend).unwrap();
        assert!(tr.value > 0.0 && tr.value.is_finite());
        assert_eq!(tr.grads.keys().collect::<Vec<_>>(), f.params.names().collect::<Vec<_>>());
        let empty = zs.slice_outer(0, 0);
        assert!(generator_recon_loss(&g_t, &g_s, &f, &empty, &cfg.loss, &backend, None).is_err());
        assert!(translator_recon_loss(&g_t, &g_s, &f, &empty, &backend).is_err());
        let mut adv = cfg.loss.clone();
        adv.recon_metric = ReconMetric::Adversarial;
        assert!(matches!(
            generator_recon_loss(&g_t, &g_s, &f, &zs, &adv, &backend, None),
            Err(PirError::InvalidConfig(_))
        ));
    }

    #[test]
    fn direction_decomposition_is_exact() {
        use crate::models::{clone_source_to_target, GeneratorArch};
        use crate::translator::TranslatorArch;
        let cfg = tiny_cfg();
        let g_s = Generator::<f32>::new(GeneratorArch::from_config(&cfg), 1).unwrap();
        let mut g_t = clone_source_to_target(&g_s);
        for (_, t) in g_t.params.iter_mut() {
            *t = t.map(|v| v * 0.9);
        }
        let f = Translator::<f32>::new(TranslatorArch::from_config(&cfg), 2).unwrap();
        let backend = FeatureStack::<f32>::random(3);
        let zs = crate::image::sample_latent::<f32>(3, cfg.z_dim, 4).unwrap();
        let d = Discriminator::<f32>::new(DiscriminatorArch::from_config(&cfg), 5).unwrap();
        for metric in [ReconMetric::L1, ReconMetric::Perceptual, ReconMetric::CodeL1, ReconMetric::Adversarial] {
            let run = |dir| {
                let mut lc = cfg.loss.clone();
                lc.recon_metric = metric;
                lc.recon_direction = dir;
                generator_recon_loss(&g_t, &g_s, &f, &zs, &lc, &backend, Some(&d)).unwrap().value as f32
            };
            let (b, s, t) = (run(ReconDirection::Both), run(ReconDirection::SourceOnly), run(ReconDirection::TargetOnly));
            assert_eq!(b, s + t, "{metric:?}");
        }
    }
}
