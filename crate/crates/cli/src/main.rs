//! `pir`: toy data generation, source pretraining, few-shot adaptation,
//! evaluation and image grids.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pir_core::checkpoint::{Checkpoint, CheckpointKind};
use pir_core::data::{emit_grid, generate_toy_domains, load_dataset, save_images};
use pir_core::perceptual::FeatureStack;
use pir_core::pretrain::{load_source, pretrain_source, save_source, toy_feature_backend, BackendLabels, PretrainOptions};
use pir_core::toy::ToySpec;
use pir_core::trainer::{init_training_with, run, EvalData, TrainOptions, TrainState, PERCEPTUAL_SEED};
use pir_core::{PirError, ReconDirection, ReconMetric, Tensor, TrainingConfig};

/// Seed of the trained toy perceptual backend.
const TOY_BACKEND_SEED: u64 = 5;

#[derive(Parser, Debug)]
#[command(name = "pir", version, about = "Few-shot generator adaptation with paired image reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the paired toy source and target domains to PNG directories.
    MakeToy(MakeToyArgs),
    /// Fit a source generator on the toy source domain.
    PretrainSource(PretrainArgs),
    /// Adapt a source generator to a few target images.
    Adapt(AdaptArgs),
    /// Print a metrics row per checkpoint.
    Eval(EvalArgs),
    /// Grid of G_S(z) over G_T(z) for shared latents.
    Sample(SampleArgs),
    /// Grid of translator outputs: content images down the side, style images across the top.
    Translate(TranslateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Full default widths at 64 px.
    Default,
    /// 32 px desk-scale setting.
    Toy,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Backend {
    /// Fixed-seed random convolutional features.
    Random,
    /// Features of a classifier trained on toy renders.
    Toy,
}

/// Config file plus per-field overrides. Flag names mirror the config keys.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML config; fields it omits take the preset's values.
    #[arg(long, env = "PIR_CONFIG")]
    config: Option<PathBuf>,
    /// Base values used when no config file is given.
    #[arg(long, value_enum, default_value = "toy")]
    preset: Preset,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long, alias = "f_steps_per_iter")]
    f_steps_per_iter: Option<usize>,
    #[arg(long, alias = "f_warmup_steps")]
    f_warmup_steps: Option<usize>,
    #[arg(long, alias = "batch_size")]
    batch_size: Option<usize>,
    #[arg(long, alias = "lr_d")]
    lr_d: Option<f64>,
    #[arg(long, alias = "lr_g")]
    lr_g: Option<f64>,
    #[arg(long, alias = "lr_f")]
    lr_f: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    /// l1, perceptual, code_l1 or adversarial.
    #[arg(long, alias = "recon_metric")]
    recon_metric: Option<ReconMetric>,
    /// source_only, target_only or both.
    #[arg(long, alias = "recon_direction")]
    recon_direction: Option<ReconDirection>,
    #[arg(long, alias = "patch_weight")]
    patch_weight: Option<f64>,
    #[arg(long, alias = "k_shot")]
    k_shot: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, alias = "checkpoint_interval")]
    checkpoint_interval: Option<u64>,
    #[arg(long, alias = "share_z")]
    share_z: Option<bool>,
    #[arg(long, alias = "freeze_mapping")]
    freeze_mapping: Option<bool>,
    #[arg(long, alias = "r1_gamma")]
    r1_gamma: Option<f64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long, alias = "z_dim")]
    z_dim: Option<usize>,
    #[arg(long, alias = "eval_samples")]
    eval_samples: Option<usize>,
    #[arg(long, alias = "balance_constant")]
    balance_constant: Option<f64>,
}

macro_rules! apply {
    ($cfg:expr, $args:expr; $($field:ident).+ <- $flag:ident, $($rest:tt)*) => {
        if let Some(v) = $args.$flag.clone() {
            $cfg.$($field).+ = v;
        }
        apply!($cfg, $args; $($rest)*);
    };
    ($cfg:expr, $args:expr;) => {};
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainingConfig, PirError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| PirError::InvalidConfig(format!("{}: {e}", path.display())))?;
                TrainingConfig::from_toml_str(&text)
                    .map_err(|e| PirError::InvalidConfig(format!("{}: {e}", path.display())))?
            }
            None => match self.preset {
                Preset::Default => TrainingConfig::default(),
                Preset::Toy => TrainingConfig::toy(),
            },
        };
        apply!(cfg, self;
            iterations <- iterations,
            f_steps_per_iter <- f_steps_per_iter,
            f_warmup_steps <- f_warmup_steps,
            batch_size <- batch_size,
            lr_d <- lr_d,
            lr_g <- lr_g,
            lr_f <- lr_f,
            beta1 <- beta1,
            beta2 <- beta2,
            loss.lambda1 <- lambda1,
            loss.lambda2 <- lambda2,
            loss.recon_metric <- recon_metric,
            loss.recon_direction <- recon_direction,
            loss.patch_weight <- patch_weight,
            k_shot <- k_shot,
            seed <- seed,
            checkpoint_interval <- checkpoint_interval,
            share_z <- share_z,
            freeze_mapping <- freeze_mapping,
            r1_gamma <- r1_gamma,
            resolution <- resolution,
            z_dim <- z_dim,
            eval_samples <- eval_samples,
            balance_constant <- balance_constant,
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct MakeToyArgs {
    /// Receives `source/`, `target/` and a content manifest per domain.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    /// Paired images per domain.
    #[arg(long, default_value_t = 2000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = PretrainOptions::default().steps)]
    steps: usize,
    #[arg(long = "pretrain-batch-size", default_value_t = PretrainOptions::default().batch_size)]
    pretrain_batch_size: usize,
    #[arg(long = "pretrain-lr", default_value_t = PretrainOptions::default().lr)]
    pretrain_lr: f64,
    #[arg(long = "pretrain-seed", default_value_t = 0)]
    pretrain_seed: u64,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Source checkpoint from `pretrain-source`.
    #[arg(long, required_unless_present = "resume")]
    source: Option<PathBuf>,
    /// Directory of target-domain images.
    #[arg(long, required_unless_present = "resume")]
    data: Option<PathBuf>,
    /// Checkpoints and the loss log go here.
    #[arg(long)]
    out: PathBuf,
    /// Naive fine-tuning without the translator.
    #[arg(long)]
    baseline: bool,
    /// Continue a run from one of its checkpoints; only `--iterations` is
    /// taken from the flags, everything else from the checkpoint.
    #[arg(long, conflicts_with_all = ["source", "data", "baseline"])]
    resume: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "random")]
    backend: Backend,
    /// Reference images for an evaluation after the last iteration.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    progress_every: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Adaptation checkpoints to evaluate.
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
    /// Directory of reference target images.
    #[arg(long)]
    real: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides the checkpoint's `eval_samples`.
    #[arg(long)]
    samples: Option<usize>,
    /// Also print each report as TOML.
    #[arg(long)]
    toml: bool,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    /// Content images; G_S samples when absent.
    #[arg(long)]
    content: Option<PathBuf>,
    /// Style images; the checkpoint's k-shot images when absent.
    #[arg(long)]
    style: Option<PathBuf>,
    /// Rows of the grid.
    #[arg(long, default_value_t = 6)]
    n_content: usize,
    /// Columns of the grid after the content column.
    #[arg(long, default_value_t = 5)]
    n_style: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn make_toy(a: &MakeToyArgs) -> anyhow::Result<()> {
    let spec = ToySpec {
        resolution: a.resolution,
        count: a.count,
        seed: a.seed,
    };
    let (src, tgt) = generate_toy_domains(&spec)?;
    for (name, ds) in [("source", &src), ("target", &tgt)] {
        save_images(&ds.images, &a.out.join(name), name)?;
        ds.manifest.write(&a.out.join(format!("{name}-manifest.toml")))?;
    }
    println!("wrote {} paired images per domain to {}", a.count, a.out.display());
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> anyhow::Result<()> {
    let cfg = a.config.resolve()?;
    let opts = PretrainOptions {
        steps: a.steps,
        batch_size: a.pretrain_batch_size,
        lr: a.pretrain_lr,
        seed: a.pretrain_seed,
        ..PretrainOptions::default()
    };
    let every = (opts.steps / 20).max(1);
    let (g_s, tail) = pretrain_source(&cfg, &opts, |step, loss| {
        if step % every == 0 {
            log::info!("pretrain step {step}/{}: loss {loss:.4}", opts.steps);
        }
    })?;
    save_source(&g_s, &cfg, &a.out)?;
    println!("source generator written to {} (final loss {tail:.4})", a.out.display());
    Ok(())
}

fn adapt(a: &AdaptArgs) -> anyhow::Result<()> {
    let mut state = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let mut s = TrainState::from_checkpoint(&ck)?;
            if let Some(it) = a.config.iterations {
                s.cfg.iterations = it;
            }
            log::info!("resuming at iteration {} of {}", s.iteration, s.cfg.iterations);
            s
        }
        None => {
            let mut cfg = a.config.resolve()?;
            cfg.baseline_mode |= a.baseline;
            let (Some(source), Some(data)) = (&a.source, &a.data) else {
                bail!("--source and --data are required without --resume");
            };
            let (g_s, source_cfg) = load_source(source)?;
            if source_cfg.arch != cfg.arch || source_cfg.z_dim != cfg.z_dim || source_cfg.resolution != cfg.resolution {
                return Err(PirError::InvalidConfig(format!(
                    "{} was trained with a different architecture, z_dim or resolution",
                    source.display()
                ))
                .into());
            }
            let dataset = load_dataset(data, cfg.resolution)?;
            let backend = match a.backend {
                Backend::Random => FeatureStack::random(PERCEPTUAL_SEED),
                Backend::Toy => {
                    log::info!("fitting the toy perceptual backend");
                    toy_feature_backend(cfg.resolution, BackendLabels::ContentAndStyle, TOY_BACKEND_SEED)?
                }
            };
            init_training_with(&g_s, &dataset, &cfg, backend)?
        }
    };
    let eval = match &a.eval_data {
        Some(dir) => Some(EvalData {
            real: load_dataset(dir, state.cfg.resolution)?.images,
            seed: state.cfg.seed,
        }),
        None => None,
    };
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        loss_log: Some(a.out.join("losses.jsonl")),
        eval,
        progress_every: a.progress_every,
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    state.cfg.save(&a.out.join("config.toml"))?;
    let outcome = run(&mut state, &opts)?;
    if let Some(last) = outcome.checkpoints.last() {
        println!("final checkpoint {}", last.display());
    }
    if let Some(m) = outcome.metrics {
        println!("{}", m.row(&run_label(&state)));
    }
    Ok(())
}

fn run_label(s: &TrainState) -> String {
    let kind = match s.kind() {
        CheckpointKind::Baseline => "baseline",
        _ => "pir",
    };
    format!("{kind}@{}", s.iteration)
}

fn load_state(path: &Path) -> anyhow::Result<TrainState> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(TrainState::from_checkpoint(&ck)?)
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    println!("{:<24} | {:>9} | {:<15} | {:>8}", "checkpoint", "FID", "LD mean (std)", "balance");
    let mut real: Option<(usize, Tensor<f32>)> = None;
    for path in &a.checkpoints {
        let mut s = load_state(path)?;
        if let Some(n) = a.samples {
            s.cfg.eval_samples = n;
        }
        let res = s.cfg.resolution;
        let images = match &real {
            Some((r, t)) if *r == res => t.clone(),
            _ => {
                let t = load_dataset(&a.real, res)?.images;
                real = Some((res, t.clone()));
                t
            }
        };
        let report = s.evaluate(&images, a.seed)?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        println!("{}", report.row(&name));
        if report.degenerate_clusters {
            log::warn!("{name}: some clusters hold fewer than two samples");
        }
        if a.toml {
            println!("{}", report.to_toml_string()?);
        }
    }
    Ok(())
}

fn sample(a: &SampleArgs) -> anyhow::Result<()> {
    if a.n == 0 {
        return Err(PirError::InvalidArgument("--n must be positive".into()).into());
    }
    let s = load_state(&a.checkpoint)?;
    let g_s = s.g_s.sample(a.n, a.seed)?;
    let g_t = s.g_t.sample(a.n, a.seed)?;
    let grid = Tensor::concat_outer(&[&g_s, &g_t])?;
    emit_grid(&grid, 2, a.n, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn translate(a: &TranslateArgs) -> anyhow::Result<()> {
    if a.n_content == 0 || a.n_style == 0 {
        return Err(PirError::InvalidArgument("--n-content and --n-style must be positive".into()).into());
    }
    let s = load_state(&a.checkpoint)?;
    let Some(f) = &s.f else {
        return Err(PirError::InvalidArgument(format!("{} is a baseline run without a translator", a.checkpoint.display())).into());
    };
    let res = s.cfg.resolution;
    let first = |t: Tensor<f32>, n: usize| {
        let n = n.min(t.dim(0));
        t.slice_outer(0, n)
    };
    let content = match &a.content {
        Some(dir) => first(load_dataset(dir, res)?.images, a.n_content),
        None => s.g_s.sample(a.n_content, a.seed)?,
    };
    let style = match &a.style {
        Some(dir) => first(load_dataset(dir, res)?.images, a.n_style),
        None => first(s.reals.clone(), a.n_style),
    };
    let (rows, cols) = (content.dim(0), style.dim(0));
    // Top-left cell stays blank; style images fill the first row and content
    // images the first column.
    let blank = Tensor::full(&[1, 3, res, res], -1.0f32);
    let mut cells: Vec<Tensor<f32>> = vec![blank];
    cells.extend((0..cols).map(|j| style.slice_outer(j, j + 1)));
    for i in 0..rows {
        let c = content.slice_outer(i, i + 1);
        let repeated = Tensor::concat_outer(&vec![&c; cols])?;
        cells.push(c.clone());
        cells.push(f.translate(&repeated, &style)?);
    }
    let refs: Vec<&Tensor<f32>> = cells.iter().collect();
    emit_grid(&Tensor::concat_outer(&refs)?, rows + 1, cols + 1, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

/// 1 for configuration problems, 2 for everything that fails at run time.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<PirError>() {
        Some(PirError::InvalidConfig(_) | PirError::ConfigParse(_) | PirError::InvalidArgument(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::MakeToy(a) => make_toy(a),
        Command::PretrainSource(a) => pretrain(a),
        Command::Adapt(a) => adapt(a),
        Command::Eval(a) => eval(a),
        Command::Sample(a) => sample(a),
        Command::Translate(a) => translate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(PirError::Diverged { snapshot: Some(p), .. }) = e.downcast_ref::<PirError>() {
                eprintln!("snapshot written to {}", p.display());
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
