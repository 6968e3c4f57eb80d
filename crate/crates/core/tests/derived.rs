//! Checks whose expected values come from independent computations: a trained
//! probe, Monte-Carlo estimates, short training runs.

use pir_core::data::generate_toy_domains;
use pir_core::losses::translator_recon_on;
use pir_core::metrics::{extract_feature_stats, FlattenExtractor};
use pir_core::models::{discriminate, Generator, GeneratorArch};
use pir_core::perceptual::{perceptual_distance, FeatureStack};
use pir_core::probe::{Probe, ProbeKind, ProbeTraining};
use pir_core::toy::ToySpec;
use pir_core::trainer::init_training;
use pir_core::translator::{Translator, TranslatorArch};
use pir_core::{Tensor, TrainingConfig};
use pir_tensor::Adam;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn small_cfg() -> TrainingConfig {
    let mut cfg = TrainingConfig::toy();
    cfg.resolution = 16;
    cfg.z_dim = 8;
    cfg.batch_size = 4;
    cfg.k_shot = 10;
    cfg.arch.w_dim = 16;
    cfg.arch.mapping_layers = 2;
    cfg.arch.gen_channels = vec![16, 16, 8, 8];
    cfg.arch.disc_channels = vec![8, 8, 16, 16];
    cfg.arch.content_channels = 8;
    cfg.arch.translator_channels = 8;
    cfg.arch.style_dim = 4;
    cfg.f_warmup_steps = 0;
    cfg
}

#[test]
fn linear_probe_separates_the_toy_domains() {
    let spec = ToySpec {
        resolution: 16,
        count: 300,
        seed: 4,
    };
    let (src, tgt) = generate_toy_domains(&spec).unwrap();
    let x = Tensor::concat_outer(&[&src.images, &tgt.images]).unwrap();
    let labels: Vec<usize> = (0..600).map(|i| usize::from(i >= 300)).collect();
    let mut probe = Probe::new(ProbeKind::Linear, 2, 16, 1).unwrap();
    let opts = ProbeTraining {
        steps: 300,
        augment: false,
        ..Default::default()
    };
    probe.train(&x, &labels, &opts).unwrap();
    let (hs, ht) = generate_toy_domains(&ToySpec { seed: 5, ..spec }).unwrap();
    let held = Tensor::concat_outer(&[&hs.images, &ht.images]).unwrap();
    let acc = probe.accuracy(&held, &labels).unwrap();
    assert!(acc >= 0.95, "held-out domain accuracy {acc}");
}

#[test]
fn feature_statistics_recover_a_known_gaussian() {
    // x = L e with e standard normal, so the covariance is L L^T.
    let mean = [1.0, -2.0, 0.5];
    let l = [[1.0, 0.0, 0.0], [0.5, 2.0, 0.0], [-0.3, 0.4, 1.5]];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let mut rows = Vec::with_capacity(n * 3);
    for _ in 0..n {
        let e: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        for (r, m) in l.iter().zip(mean) {
            rows.push(m + r.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    let stats = extract_feature_stats(&Tensor::from_vec(&[n, 3], rows).unwrap(), &FlattenExtractor).unwrap();
    for i in 0..3 {
        assert!((stats.mean[i] - mean[i]).abs() <= 0.02 * mean[i].abs(), "mean {i}");
        for j in 0..3 {
            let cov: f64 = (0..3).map(|k| l[i][k] * l[j][k]).sum();
            // Off-diagonal entries are judged against the variance scale;
            // their own sampling error at this n exceeds 2% of a small value.
            let scale = (l[i].iter().map(|v| v * v).sum::<f64>() * l[j].iter().map(|v| v * v).sum::<f64>()).sqrt();
            let tol = 0.02 * scale;
            assert!((stats.cov[(i, j)] - cov).abs() <= tol, "cov ({i}, {j}): {} vs {cov}", stats.cov[(i, j)]);
        }
    }
}

#[test]
fn trained_discriminator_prefers_reals_over_initial_fakes() {
    let cfg = small_cfg();
    let g_s = Generator::<f32>::new(GeneratorArch::from_config(&cfg), 3).unwrap();
    let (_, target) = generate_toy_domains(&ToySpec {
        resolution: 16,
        count: 10,
        seed: 1,
    })
    .unwrap();
    let mut s = init_training(&g_s, &target, &cfg).unwrap();
    let fakes0 = s.g_t.sample(32, 77).unwrap();
    for _ in 0..40 {
        s.train_iteration().unwrap();
    }
    let mean = |t: Tensor<f32>| t.to_f64_vec().iter().sum::<f64>() / t.len() as f64;
    let real = mean(discriminate(&s.d, &s.reals).unwrap().0);
    let fake = mean(discriminate(&s.d, &fakes0).unwrap().0);
    assert!(real > fake, "real logit {real} vs initial-fake logit {fake}");
}

#[test]
fn translator_learns_self_reconstruction_on_a_frozen_pair() {
    // Paired renders of the two toy domains stand in for a converged G_S, G_T pair.
    let cfg = TrainingConfig::toy();
    let (src, tgt) = generate_toy_domains(&ToySpec {
        resolution: cfg.resolution,
        count: 400,
        seed: 8,
    })
    .unwrap();
    let mut f = Translator::<f32>::new(TranslatorArch::from_config(&cfg), 4).unwrap();
    let backend = FeatureStack::<f32>::random(5);
    let held = src.images.slice_outer(384, 400);
    let self_rec = |f: &Translator<f32>| {
        let d = perceptual_distance(&backend, &f.translate(&held, &held).unwrap(), &held).unwrap();
        d.iter().sum::<f64>() / d.len() as f64
    };
    let before = self_rec(&f);
    let mut opt = Adam::new(&f.params, cfg.lr_f, cfg.beta1, cfg.beta2);
    for step in 0..600 {
        let at = (step * cfg.batch_size) % 384;
        let x_s = src.images.slice_outer(at, at + cfg.batch_size);
        let x_t = tgt.images.slice_outer(at, at + cfg.batch_size);
        let e = translator_recon_on(&f, &x_s, &x_t, &backend).unwrap();
        opt.step(&mut f.params, &e.grads);
    }
    let after = self_rec(&f);
    eprintln!("self-reconstruction {before:.3} -> {after:.3}");
    assert!(after < 0.1 * before, "self-reconstruction {before} -> {after}");
}
