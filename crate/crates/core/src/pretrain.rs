//! Source generator for the toy domains. The generator is fitted by direct
//! regression: latent coordinates `z[..CONTENT_DIMS]` fix the content, and the
//! target image is that content rendered in the source style. The remaining
//! coordinates carry no content, so the source distribution is the toy
//! source domain with a known content map.
//!
//! Pixel regression learns position and size reliably; the three shape types
//! differ in few pixels and come out softened.
//!
//! The module also fits the trained perceptual backend for toy runs.

use std::collections::BTreeMap;
use std::path::Path;

use pir_tensor::{Adam, Graph, ParamSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta};
use crate::config::TrainingConfig;
use crate::error::{PirError, Result};
use crate::image::sample_latent_with;
use crate::models::{Generator, GeneratorArch};
use crate::perceptual::FeatureStack;
use crate::probe::{Probe, ProbeKind, ProbeTraining};
use crate::toy::{
    contents_from_latents, render_batch, render_batch_styled, sample_contents, Domain, RenderStyle, CONTENT_DIMS,
    NUM_CONTENT_CLASSES,
};

#[derive(Clone, Debug)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Leading fraction of steps that use squared error before switching to L1.
    pub squared_fraction: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            steps: 8000,
            batch_size: 16,
            lr: 2e-3,
            seed: 0,
            squared_fraction: 0.4,
        }
    }
}

/// Images used to fit a toy feature backend.
const BACKEND_IMAGES: usize = 4000;

/// What a trained toy backend is taught to tell apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendLabels {
    /// Shape type and quadrant only; rendering style is a nuisance. Suited to
    /// measuring content variety across domains.
    Content,
    /// Content crossed with fill mode and background polarity. Suited to
    /// reconstruction losses, which must see both content and style.
    ContentAndStyle,
}

/// Trained perceptual backend: the trunk of a convolutional classifier fitted
/// on toy renders. Half the images use the two domain styles and half use
/// random palettes, fill modes and textures, so the features follow layout
/// and shape type across palettes.
pub fn toy_feature_backend(resolution: usize, labels: BackendLabels, seed: u64) -> Result<FeatureStack<f32>> {
    let contents = sample_contents(BACKEND_IMAGES, seed ^ 0x6261_636b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let styles: Vec<RenderStyle> = (0..BACKEND_IMAGES)
        .map(|i| match i % 4 {
            0 => RenderStyle::of(Domain::Source),
            1 => RenderStyle::of(Domain::Target),
            _ => RenderStyle::random(&mut rng),
        })
        .collect();
    let images = render_batch_styled(&contents, &styles, resolution);
    let (classes, ys): (usize, Vec<usize>) = match labels {
        BackendLabels::Content => (NUM_CONTENT_CLASSES, contents.iter().map(|c| c.class()).collect()),
        BackendLabels::ContentAndStyle => (
            4 * NUM_CONTENT_CLASSES,
            contents
                .iter()
                .zip(&styles)
                .map(|(c, s)| {
                    let style = usize::from(s.outline) + 2 * usize::from(s.light_background());
                    c.class() + NUM_CONTENT_CLASSES * style
                })
                .collect(),
        ),
    };
    let mut probe = Probe::new(ProbeKind::Conv, classes, resolution, seed)?;
    let training = ProbeTraining {
        steps: 1500,
        seed,
        ..ProbeTraining::default()
    };
    probe.train(&images, &ys, &training)?;
    probe.trunk()
}

/// Fit a fresh source generator. `progress` sees `(step, loss)` after every
/// update; the return value carries the mean loss of the last 50 steps.
pub fn pretrain_source(
    cfg: &TrainingConfig,
    opts: &PretrainOptions,
    mut progress: impl FnMut(usize, f64),
) -> Result<(Generator<f32>, f64)> {
    cfg.validate()?;
    if cfg.z_dim < CONTENT_DIMS {
        return Err(PirError::config(format!("z_dim must be at least {CONTENT_DIMS}")));
    }
    if opts.steps == 0 || opts.batch_size == 0 {
        return Err(PirError::arg("pretraining needs steps and batch_size >= 1"));
    }
    let mut gen = Generator::<f32>::new(GeneratorArch::from_config(cfg), opts.seed)?;
    let mut opt = Adam::new(&gen.params, opts.lr, 0.9, 0.99);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let squared_until = (opts.squared_fraction * opts.steps as f64) as usize;
    let mut tail = Vec::new();
    for step in 0..opts.steps {
        // Cosine decay to a tenth of the base rate.
        let frac = step as f64 / opts.steps as f64;
        opt.lr = opts.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * frac).cos()));
        let z = sample_latent_with(opts.batch_size, cfg.z_dim, &mut rng)?;
        let contents = contents_from_latents(&z)?;
        let target = render_batch(&contents, Domain::Source, cfg.resolution);
        let mut g = Graph::new();
        let p = gen.params.bind(&mut g, true);
        let zv = g.constant(z);
        let out = gen.forward(&mut g, &p, zv);
        let t = g.constant(target);
        let d = g.sub(out, t);
        let d = if step < squared_until { g.square(d) } else { g.abs(d) };
        let loss = g.mean_all(d);
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(PirError::Diverged {
                iteration: step as u64,
                phase: "pretrain",
                detail: format!("loss {value}"),
                snapshot: None,
            });
        }
        let mut grads = g.backward(loss);
        opt.step(&mut gen.params, &p.grads(&mut grads));
        progress(step, value);
        if step + 50 >= opts.steps {
            tail.push(value);
        }
    }
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    Ok((gen, mean))
}

/// Store a source generator with the config it was built from.
pub fn save_source(g_s: &Generator<f32>, cfg: &TrainingConfig, path: &Path) -> Result<()> {
    let mut tensors = ParamSet::new();
    tensors.extend_scoped("g_s", &g_s.params);
    let meta = CheckpointMeta {
        kind: CheckpointKind::Source,
        iteration: 0,
        optimizer_steps: BTreeMap::new(),
        metrics: None,
    };
    Checkpoint::new(cfg.clone(), meta, tensors).save(path)
}

/// Source generator from any checkpoint that holds one.
pub fn load_source(path: &Path) -> Result<(Generator<f32>, TrainingConfig)> {
    let ck = Checkpoint::load(path)?;
    let gen = Generator::from_params(GeneratorArch::from_config(&ck.config), ck.module("g_s"))?;
    Ok((gen, ck.config))
}
