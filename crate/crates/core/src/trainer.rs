//! Adaptation loop. Every iteration runs, in order, one discriminator update,
//! one target-generator update and `f_steps_per_iter` translator updates.
//!
//! All randomness of an iteration comes from ChaCha8 streams keyed by
//! `(seed, iteration, phase)`, so a run resumed from a checkpoint continues
//! bit-identically.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use pir_tensor::{Adam, Graph, ParamGrads, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta};
use crate::config::TrainingConfig;
use crate::data::{select_k_shot, FewShotDataset};
use crate::error::{PirError, Result};
use crate::image::{check_images, sample_latent_with};
use crate::losses::{d_loss_var, g_loss_var, paired_recon, translator_recon_on, BoundTranslator, ReconContext};
use crate::metrics::{evaluate, MetricsReport, PooledFeatures};
use crate::models::{clone_source_to_target, Discriminator, DiscriminatorArch, Generator, GeneratorArch};
use crate::perceptual::FeatureStack;
use crate::translator::{Translator, TranslatorArch};

/// Seed of the default perceptual backend. Fixed, so distances are comparable
/// across runs with different training seeds.
pub const PERCEPTUAL_SEED: u64 = 0x7065_7263;

const PHASE_D: u64 = 0;
const PHASE_G: u64 = 1;
const PHASE_F: u64 = 2;
const PHASE_STREAMS: u64 = 16;

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLosses {
    pub iteration: u64,
    pub l_g: f64,
    pub l_d: f64,
    /// Generator reconstruction loss; absent in baseline mode.
    pub l_rec: Option<f64>,
    /// Translator loss, averaged over the iteration's translator steps.
    pub l_rec_prime: Option<f64>,
}

/// Independent stream for a sub-module's initialization.
fn sub_seed(seed: u64, tag: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)).random()
}

pub struct TrainState {
    pub cfg: TrainingConfig,
    pub iteration: u64,
    pub g_s: Generator<f32>,
    pub g_t: Generator<f32>,
    pub d: Discriminator<f32>,
    /// Absent in baseline mode.
    pub f: Option<Translator<f32>>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub opt_f: Option<Adam<f32>>,
    /// The k-shot training images.
    pub reals: Tensor<f32>,
    pub backend: FeatureStack<f32>,
    /// Losses of every iteration run since this state was built.
    pub history: Vec<IterationLosses>,
    /// Where a diverged run writes its snapshot.
    pub snapshot_dir: Option<PathBuf>,
    g_s_checksum: u64,
}

/// [`init_training_with`] using the fixed-seed random perceptual backend.
pub fn init_training(g_s: &Generator<f32>, dataset: &FewShotDataset, cfg: &TrainingConfig) -> Result<TrainState> {
    init_training_with(g_s, dataset, cfg, FeatureStack::random(PERCEPTUAL_SEED))
}

/// Clone `g_s` into the target generator, draw fresh discriminator and
/// translator weights from the config seed, and take the k-shot subset.
pub fn init_training_with(
    g_s: &Generator<f32>,
    dataset: &FewShotDataset,
    cfg: &TrainingConfig,
    backend: FeatureStack<f32>,
) -> Result<TrainState> {
    cfg.validate()?;
    if dataset.resolution() != cfg.resolution || g_s.arch.resolution != cfg.resolution {
        return Err(PirError::config(format!(
            "resolution mismatch: config {}, source generator {}, dataset {}",
            cfg.resolution,
            g_s.arch.resolution,
            dataset.resolution()
        )));
    }
    if g_s.arch != GeneratorArch::from_config(cfg) {
        return Err(PirError::config("source generator architecture differs from the config"));
    }
    if dataset.len() < cfg.k_shot {
        return Err(PirError::config(format!(
            "k_shot {} exceeds the {} images of `{}`",
            cfg.k_shot,
            dataset.len(),
            dataset.domain_name
        )));
    }
    check_images(&dataset.images, cfg.resolution)?;
    let reals = if dataset.len() == cfg.k_shot {
        dataset.images.clone()
    } else {
        select_k_shot(dataset, cfg.k_shot, cfg.seed)?.images
    };
    let g_t = clone_source_to_target(g_s);
    let d = Discriminator::new(DiscriminatorArch::from_config(cfg), sub_seed(cfg.seed, 1))?;
    let f = if cfg.baseline_mode {
        None
    } else {
        let mut f = Translator::new(TranslatorArch::from_config(cfg), sub_seed(cfg.seed, 2))?;
        warm_up_translator(&mut f, g_s, &backend, cfg)?;
        Some(f)
    };
    let opt_g = Adam::new(&g_t.params, cfg.lr_g, cfg.beta1, cfg.beta2);
    let opt_d = Adam::new(&d.params, cfg.lr_d, cfg.beta1, cfg.beta2);
    let opt_f = f.as_ref().map(|f| Adam::new(&f.params, cfg.lr_f, cfg.beta1, cfg.beta2));
    Ok(TrainState {
        cfg: cfg.clone(),
        iteration: 0,
        g_s_checksum: g_s.params.checksum(),
        g_s: g_s.clone(),
        g_t,
        d,
        f,
        opt_g,
        opt_d,
        opt_f,
        reals,
        backend,
        history: Vec::new(),
        snapshot_dir: None,
    })
}

/// Fit `F(x, x) = x` on source samples with a throwaway optimizer, so the
/// adaptation optimizers start from fresh moments whatever the warmup length.
fn warm_up_translator(
    f: &mut Translator<f32>,
    g_s: &Generator<f32>,
    backend: &FeatureStack<f32>,
    cfg: &TrainingConfig,
) -> Result<()> {
    if cfg.f_warmup_steps == 0 {
        return Ok(());
    }
    let mut opt = Adam::new(&f.params, cfg.lr_f, cfg.beta1, cfg.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 3));
    for step in 0..cfg.f_warmup_steps {
        let z = sample_latent_with(cfg.batch_size, cfg.z_dim, &mut rng)?;
        let x = g_s.generate(&z)?;
        let eval = translator_recon_on(f, &x, &x, backend)?;
        if !eval.value.is_finite() {
            return Err(PirError::Diverged {
                iteration: step as u64,
                phase: "translator warmup",
                detail: format!("loss {}", eval.value),
                snapshot: None,
            });
        }
        opt.step(&mut f.params, &eval.grads);
    }
    Ok(())
}

/// Probe step of the finite-difference gradient penalty.
const R1_STEP: f64 = 0.02;

/// Stochastic estimate of `E ||grad_x D(x)||^2` on the image head that needs
/// only first-order gradients: for `n ~ N(0, I)`,
/// `E[(D(x + s n) - D(x))^2] / s^2` tends to the squared gradient norm as
/// `s -> 0`.
fn r1_estimate(
    g: &mut Graph<f32>,
    d: &Discriminator<f32>,
    p: &pir_tensor::Bound,
    real: &Tensor<f32>,
    probe: &Tensor<f32>,
    real_out: &crate::models::DiscOut,
) -> pir_tensor::Var {
    let step = R1_STEP as f32;
    let moved = Tensor::from_vec(
        real.shape(),
        real.data().iter().zip(probe.data()).map(|(x, n)| x + step * n).collect(),
    )
    .expect("same shape");
    let mv = g.constant(moved);
    let mo = d.forward(g, p, mv);
    let diff = g.sub(mo.image, real_out.image);
    let sq = g.square(diff);
    let m = g.mean_all(sq);
    g.mul_scalar(m, 1.0 / (R1_STEP * R1_STEP))
}

fn scale_grads(grads: &mut ParamGrads<f32>, s: f64) {
    if s != 1.0 {
        for t in grads.values_mut() {
            *t = t.map(|v| v * s as f32);
        }
    }
}

impl TrainState {
    fn phase_rng(&self, phase: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.iteration * PHASE_STREAMS + phase);
        rng
    }

    fn latents(&self, phase: u64) -> Result<Tensor<f32>> {
        sample_latent_with(self.cfg.batch_size, self.cfg.z_dim, &mut self.phase_rng(phase))
    }

    pub fn kind(&self) -> CheckpointKind {
        if self.cfg.baseline_mode {
            CheckpointKind::Baseline
        } else {
            CheckpointKind::Pir
        }
    }

    /// Checksum of the frozen source generator taken at initialization.
    pub fn g_s_reference_checksum(&self) -> u64 {
        self.g_s_checksum
    }

    fn diverged(&self, phase: &'static str, detail: String) -> PirError {
        let snapshot = self.snapshot_dir.as_ref().and_then(|dir| {
            let path = dir.join(format!("diverged-{:06}-{phase}.pir", self.iteration));
            match self.to_checkpoint(None).and_then(|c| c.save(&path)) {
                Ok(()) => Some(path),
                Err(e) => {
                    log::error!("could not write divergence snapshot: {e}");
                    None
                }
            }
        });
        PirError::Diverged {
            iteration: self.iteration,
            phase,
            detail,
            snapshot,
        }
    }

    fn check_finite(&self, phase: &'static str, name: &str, v: f64) -> Result<()> {
        if v.is_finite() {
            Ok(())
        } else {
            Err(self.diverged(phase, format!("{name} = {v}")))
        }
    }

    /// Phase 1: one discriminator step on k-shot reals against target fakes.
    pub fn d_phase(&mut self) -> Result<f64> {
        let mut rng = self.phase_rng(PHASE_D);
        let n = self.reals.dim(0);
        let idx: Vec<usize> = (0..self.cfg.batch_size).map(|_| rng.random_range(0..n)).collect();
        let real_t = self.reals.select_outer(&idx);
        let z = sample_latent_with(self.cfg.batch_size, self.cfg.z_dim, &mut rng)?;
        let fake = self.g_t.generate(&z)?;
        let mut g = Graph::new();
        let p = self.d.params.bind(&mut g, true);
        let r = g.constant(real_t.clone());
        let f = g.constant(fake);
        let ro = self.d.forward(&mut g, &p, r);
        let fo = self.d.forward(&mut g, &p, f);
        let mut loss = d_loss_var(&mut g, &ro, &fo, self.cfg.loss.patch_weight);
        let value = g.value(loss).item() as f64;
        if self.cfg.r1_gamma > 0.0 {
            let probe = Tensor::<f32>::randn(real_t.shape(), 1.0, &mut rng);
            let penalty = r1_estimate(&mut g, &self.d, &p, &real_t, &probe, &ro);
            let penalty = g.mul_scalar(penalty, self.cfg.r1_gamma / 2.0);
            loss = g.add(loss, penalty);
        }
        self.check_finite("discriminator", "l_d", value)?;
        let mut grads = g.backward(loss);
        self.opt_d.step(&mut self.d.params, &p.grads(&mut grads));
        Ok(value)
    }

    /// Phase 2: one target-generator step on the adversarial loss plus
    /// `lambda1` times the paired reconstruction loss. Returns `(l_g, l_rec)`.
    pub fn g_phase(&mut self) -> Result<(f64, Option<f64>)> {
        let z = self.latents(PHASE_G)?;
        let lc = self.cfg.loss.clone();
        let mut g = Graph::new();
        let pt = self.g_t.params.bind(&mut g, true);
        let pd = self.d.params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let x_t = self.g_t.forward(&mut g, &pt, zv);
        let out = self.d.forward(&mut g, &pd, x_t);
        let adv = g_loss_var(&mut g, &out, lc.patch_weight);
        let l_g = g.value(adv).item() as f64;
        let (total, l_rec) = match &self.f {
            Some(f) => {
                let x_s = g.constant(self.g_s.generate(&z)?);
                let bf = BoundTranslator::new(f, &mut g, false);
                let ctx = ReconContext {
                    backend: &self.backend,
                    disc: Some((&self.d, &pd)),
                    patch_weight: lc.patch_weight,
                };
                let rec = paired_recon(&mut g, &bf, &ctx, x_s, x_t, lc.recon_metric, lc.recon_direction)?;
                let l_rec = g.value(rec).item() as f64;
                let weighted = g.mul_scalar(rec, lc.lambda1);
                (g.add(adv, weighted), Some(l_rec))
            }
            None => (adv, None),
        };
        self.check_finite("generator", "l_g", l_g)?;
        if let Some(v) = l_rec {
            self.check_finite("generator", "l_rec", v)?;
        }
        let mut grads = g.backward(total);
        let mut grads = pt.grads(&mut grads);
        if self.cfg.freeze_mapping {
            grads.retain(|name, _| !name.starts_with("map"));
        }
        self.opt_g.step(&mut self.g_t.params, &grads);
        Ok((l_g, l_rec))
    }

    /// Phase 3: `f_steps_per_iter` translator steps on `lambda2` times the
    /// translator reconstruction loss. One image pair batch is generated per
    /// phase and shared by its steps. Returns the mean loss, or `None` in
    /// baseline mode.
    pub fn f_phase(&mut self) -> Result<Option<f64>> {
        if self.f.is_none() {
            return Ok(None);
        }
        let phase = if self.cfg.share_z { PHASE_G } else { PHASE_F };
        let z = self.latents(phase)?;
        let x_s = self.g_s.generate(&z)?;
        let x_t = self.g_t.generate(&z)?;
        let steps = self.cfg.f_steps_per_iter;
        let mut sum = 0.0;
        for _ in 0..steps {
            let f = self.f.as_ref().expect("checked above");
            let mut eval = translator_recon_on(f, &x_s, &x_t, &self.backend)?;
            self.check_finite("translator", "l_rec_prime", eval.value)?;
            sum += eval.value;
            scale_grads(&mut eval.grads, self.cfg.loss.lambda2);
            let (f, opt) = (self.f.as_mut(), self.opt_f.as_mut());
            opt.expect("translator optimizer exists with the translator")
                .step(&mut f.expect("checked above").params, &eval.grads);
        }
        Ok(Some(sum / steps as f64))
    }

    /// One full iteration; advances the counter and records the losses.
    pub fn train_iteration(&mut self) -> Result<IterationLosses> {
        let l_d = self.d_phase()?;
        let (l_g, l_rec) = self.g_phase()?;
        let l_rec_prime = self.f_phase()?;
        debug_assert_eq!(self.g_s.params.checksum(), self.g_s_checksum, "source generator changed");
        let losses = IterationLosses {
            iteration: self.iteration,
            l_g,
            l_d,
            l_rec,
            l_rec_prime,
        };
        self.iteration += 1;
        self.history.push(losses.clone());
        Ok(losses)
    }

    /// Full archive of the state: every module, every optimizer moment and
    /// the k-shot images.
    pub fn to_checkpoint(&self, metrics: Option<MetricsReport>) -> Result<Checkpoint> {
        let mut t = ParamSet::new();
        t.extend_scoped("g_s", &self.g_s.params);
        t.extend_scoped("g_t", &self.g_t.params);
        t.extend_scoped("d", &self.d.params);
        t.extend_scoped("perc", &self.backend.params);
        t.insert("data/reals", self.reals.clone());
        let mut steps = BTreeMap::new();
        let mut opts: Vec<(&str, &Adam<f32>)> = vec![("g_t", &self.opt_g), ("d", &self.opt_d)];
        if let (Some(f), Some(of)) = (&self.f, &self.opt_f) {
            t.extend_scoped("f", &f.params);
            opts.push(("f", of));
        }
        for (name, opt) in opts {
            let (m, v) = opt.moments();
            t.extend_scoped(&format!("opt_{name}/m"), m);
            t.extend_scoped(&format!("opt_{name}/v"), v);
            steps.insert(name.to_string(), opt.steps());
        }
        let meta = CheckpointMeta {
            kind: self.kind(),
            iteration: self.iteration,
            optimizer_steps: steps,
            metrics,
        };
        Ok(Checkpoint::new(self.cfg.clone(), meta, t))
    }

    /// Rebuild a state written by [`TrainState::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck.config.clone();
        if ck.meta.kind == CheckpointKind::Source {
            return Err(PirError::Checkpoint("a source checkpoint holds no training state".into()));
        }
        let garch = GeneratorArch::from_config(&cfg);
        let g_s = Generator::from_params(garch.clone(), ck.module("g_s"))?;
        let g_t = Generator::from_params(garch, ck.module("g_t"))?;
        let d = Discriminator::from_params(DiscriminatorArch::from_config(&cfg), ck.module("d"))?;
        let f = if cfg.baseline_mode {
            None
        } else {
            Some(Translator::from_params(TranslatorArch::from_config(&cfg), ck.module("f"))?)
        };
        let adam = |name: &str, params: &ParamSet<f32>, lr: f64| -> Result<Adam<f32>> {
            let m = ck.module(&format!("opt_{name}/m"));
            let v = ck.module(&format!("opt_{name}/v"));
            if m.max_abs_diff(params).is_none() || v.max_abs_diff(params).is_none() {
                return Err(PirError::Checkpoint(format!("optimizer state of `{name}` does not match")));
            }
            let steps = ck.meta.optimizer_steps.get(name).copied().unwrap_or(0);
            Ok(Adam::from_state(lr, cfg.beta1, cfg.beta2, steps, m, v))
        };
        let opt_g = adam("g_t", &g_t.params, cfg.lr_g)?;
        let opt_d = adam("d", &d.params, cfg.lr_d)?;
        let opt_f = f.as_ref().map(|f| adam("f", &f.params, cfg.lr_f)).transpose()?;
        let reals = ck
            .tensors
            .get("data/reals")
            .map_err(|_| PirError::Checkpoint("k-shot images are missing".into()))?
            .clone();
        check_images(&reals, cfg.resolution)?;
        let backend = FeatureStack::from_params(ck.module("perc"))?;
        Ok(Self {
            iteration: ck.meta.iteration,
            g_s_checksum: g_s.params.checksum(),
            cfg,
            g_s,
            g_t,
            d,
            f,
            opt_g,
            opt_d,
            opt_f,
            reals,
            backend,
            history: Vec::new(),
            snapshot_dir: None,
        })
    }

    /// Metrics of the current target generator against a reference set.
    pub fn evaluate(&self, real: &Tensor<f32>, seed: u64) -> Result<MetricsReport> {
        let generated = self.g_t.sample(self.cfg.eval_samples, seed)?;
        let extractor = PooledFeatures {
            stack: self.backend.clone(),
        };
        evaluate(
            &generated,
            real,
            &self.reals,
            &extractor,
            &self.backend,
            self.cfg.balance_constant,
        )
    }
}

/// Reference images for the final evaluation.
#[derive(Clone, Debug)]
pub struct EvalData {
    pub real: Tensor<f32>,
    pub seed: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoints go here as `ckpt-<iteration>.pir`; none are written without it.
    pub out_dir: Option<PathBuf>,
    /// JSON-lines loss log, appended to when resuming.
    pub loss_log: Option<PathBuf>,
    pub eval: Option<EvalData>,
    /// Log progress every this many iterations; 0 is silent.
    pub progress_every: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub metrics: Option<MetricsReport>,
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt-{iteration:06}.pir"))
}

/// Run `state` up to `cfg.iterations`, checkpointing every
/// `checkpoint_interval` iterations and at the end.
pub fn run(state: &mut TrainState, opts: &TrainOptions) -> Result<TrainOutcome> {
    if state.snapshot_dir.is_none() {
        state.snapshot_dir = opts.out_dir.clone();
    }
    let mut log: Option<BufWriter<File>> = match &opts.loss_log {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(state.iteration > 0)
                .truncate(state.iteration == 0)
                .open(path)?;
            Some(BufWriter::new(file))
        }
        None => None,
    };
    let total = state.cfg.iterations;
    let interval = state.cfg.checkpoint_interval;
    let mut checkpoints = Vec::new();
    let mut metrics = None;
    while state.iteration < total {
        let losses = match state.train_iteration() {
            Ok(l) => l,
            Err(e) => {
                if let Some(w) = log.as_mut() {
                    w.flush()?;
                }
                return Err(e);
            }
        };
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &losses)?;
            w.write_all(b"\n")?;
        }
        let it = state.iteration;
        if opts.progress_every > 0 && it.is_multiple_of(opts.progress_every) {
            log::info!(
                "iter {it}/{total}: l_d {:.4} l_g {:.4} l_rec {:?} l_rec' {:?}",
                losses.l_d,
                losses.l_g,
                losses.l_rec,
                losses.l_rec_prime
            );
        }
        let last = it == total;
        if last {
            if let Some(ev) = &opts.eval {
                metrics = Some(state.evaluate(&ev.real, ev.seed)?);
            }
        }
        if let Some(dir) = &opts.out_dir {
            if last || (interval > 0 && it.is_multiple_of(interval)) {
                let path = checkpoint_path(dir, it);
                state.to_checkpoint(if last { metrics.clone() } else { None })?.save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    Ok(TrainOutcome { checkpoints, metrics })
}

/// Initialize from `g_s` and `dataset`, then [`run`].
pub fn train(
    g_s: &Generator<f32>,
    dataset: &FewShotDataset,
    cfg: &TrainingConfig,
    opts: &TrainOptions,
) -> Result<(TrainState, TrainOutcome)> {
    let mut state = init_training(g_s, dataset, cfg)?;
    let outcome = run(&mut state, opts)?;
    Ok((state, outcome))
}
