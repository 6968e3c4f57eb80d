use pir_core::checkpoint::Checkpoint;
use pir_core::data::{generate_toy_domains, FewShotDataset};
use pir_core::models::{Generator, GeneratorArch};
use pir_core::toy::ToySpec;
use pir_core::trainer::{checkpoint_path, init_training, run, IterationLosses, TrainOptions, TrainState};
use pir_core::{PirError, Tensor, TrainingConfig};

fn tiny_cfg() -> TrainingConfig {
    let mut cfg = TrainingConfig::toy();
    cfg.resolution = 16;
    cfg.z_dim = 8;
    cfg.batch_size = 2;
    cfg.k_shot = 5;
    cfg.iterations = 10;
    cfg.f_warmup_steps = 3;
    cfg.checkpoint_interval = 5;
    cfg.arch.w_dim = 8;
    cfg.arch.mapping_layers = 1;
    cfg.arch.gen_channels = vec![8, 8, 4, 4];
    cfg.arch.disc_channels = vec![4, 4, 4, 4];
    cfg.arch.content_channels = 4;
    cfg.arch.translator_channels = 4;
    cfg.arch.style_dim = 4;
    cfg
}

fn fixtures(cfg: &TrainingConfig) -> (Generator<f32>, FewShotDataset) {
    let g_s = Generator::new(GeneratorArch::from_config(cfg), 11).unwrap();
    let (_, target) = generate_toy_domains(&ToySpec {
        resolution: cfg.resolution,
        count: 12,
        seed: 3,
    })
    .unwrap();
    (g_s, target)
}

fn state(cfg: &TrainingConfig) -> TrainState {
    let (g_s, target) = fixtures(cfg);
    init_training(&g_s, &target, cfg).unwrap()
}

#[test]
fn init_clones_the_source_generator() {
    let cfg = tiny_cfg();
    let s = state(&cfg);
    let z = pir_core::image::sample_latent::<f32>(4, cfg.z_dim, 1).unwrap();
    assert_eq!(s.g_t.generate(&z).unwrap(), s.g_s.generate(&z).unwrap());
    assert_eq!(s.iteration, 0);
    assert_eq!(s.reals.dim(0), cfg.k_shot);
}

#[test]
fn init_is_seeded() {
    let cfg = tiny_cfg();
    let (a, b) = (state(&cfg), state(&cfg));
    assert_eq!(a.d.params.checksum(), b.d.params.checksum());
    assert_eq!(
        a.f.as_ref().unwrap().params.checksum(),
        b.f.as_ref().unwrap().params.checksum()
    );
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(state(&other).d.params.checksum(), a.d.params.checksum());
}

#[test]
fn baseline_init_has_no_translator() {
    let mut cfg = tiny_cfg();
    cfg.baseline_mode = true;
    let s = state(&cfg);
    assert!(s.f.is_none() && s.opt_f.is_none());
}

#[test]
fn init_rejects_mismatches() {
    let cfg = tiny_cfg();
    let (g_s, target) = fixtures(&cfg);
    let mut big = cfg.clone();
    big.resolution = 32;
    assert!(matches!(init_training(&g_s, &target, &big), Err(PirError::InvalidConfig(_))));
    let mut many = cfg.clone();
    many.k_shot = 13;
    assert!(matches!(init_training(&g_s, &target, &many), Err(PirError::InvalidConfig(_))));
}

#[test]
fn one_iteration_respects_phase_ownership() {
    let cfg = tiny_cfg();
    let mut s = state(&cfg);
    let gs0 = s.g_s.params.checksum();
    let (d0, gt0, f0) = (
        s.d.params.checksum(),
        s.g_t.params.checksum(),
        s.f.as_ref().unwrap().params.checksum(),
    );

    s.d_phase().unwrap();
    let d1 = s.d.params.checksum();
    assert_ne!(d1, d0);
    assert_eq!(s.g_t.params.checksum(), gt0);

    s.g_phase().unwrap();
    let gt1 = s.g_t.params.checksum();
    assert_ne!(gt1, gt0);
    assert_eq!(s.f.as_ref().unwrap().params.checksum(), f0, "translator moved in the generator phase");
    assert_eq!(s.d.params.checksum(), d1);

    s.f_phase().unwrap();
    assert_ne!(s.f.as_ref().unwrap().params.checksum(), f0);
    assert_eq!(s.g_t.params.checksum(), gt1, "target generator moved in the translator phase");
    assert_eq!(s.g_s.params.checksum(), gs0);
    assert_eq!(s.opt_f.as_ref().unwrap().steps(), 4);
}

#[test]
fn four_translator_steps_per_iteration() {
    let cfg = tiny_cfg();
    let mut s = state(&cfg);
    for i in 1..=3u64 {
        s.train_iteration().unwrap();
        assert_eq!(s.opt_f.as_ref().unwrap().steps(), 4 * i);
        assert_eq!(s.opt_g.steps(), i);
        assert_eq!(s.opt_d.steps(), i);
        assert_eq!(s.iteration, i);
    }
}

#[test]
fn zero_lambda1_matches_adversarial_only_update() {
    let mut cfg = tiny_cfg();
    cfg.loss.lambda1 = 0.0;
    let mut pir = state(&cfg);
    let mut base_cfg = cfg.clone();
    base_cfg.baseline_mode = true;
    let mut base = state(&base_cfg);
    assert_eq!(pir.d.params.checksum(), base.d.params.checksum());
    for s in [&mut pir, &mut base] {
        s.d_phase().unwrap();
        s.g_phase().unwrap();
    }
    assert_eq!(pir.g_t.params.max_abs_diff(&base.g_t.params), Some(0.0));
}

#[test]
fn baseline_skips_reconstruction() {
    let mut cfg = tiny_cfg();
    cfg.baseline_mode = true;
    let mut s = state(&cfg);
    let l = s.train_iteration().unwrap();
    assert!(l.l_rec.is_none() && l.l_rec_prime.is_none());
    assert!(l.l_d.is_finite() && l.l_g.is_finite());
}

#[test]
fn checkpoints_follow_the_interval_and_are_deterministic() {
    let cfg = tiny_cfg();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut finals = Vec::new();
    for dir in &dirs {
        let mut s = state(&cfg);
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            loss_log: Some(dir.path().join("losses.jsonl")),
            ..Default::default()
        };
        let out = run(&mut s, &opts).unwrap();
        assert_eq!(out.checkpoints, vec![checkpoint_path(dir.path(), 5), checkpoint_path(dir.path(), 10)]);
        let log = std::fs::read_to_string(dir.path().join("losses.jsonl")).unwrap();
        let lines: Vec<IterationLosses> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 10);
        assert_eq!(lines[9].iteration, 9);
        assert!(lines.iter().all(|l| l.l_rec.is_some() && l.l_rec_prime.is_some()));
        finals.push(std::fs::read(&out.checkpoints[1]).unwrap());
    }
    assert_eq!(finals[0], finals[1]);
}

#[test]
fn resume_is_bit_identical() {
    let cfg = tiny_cfg();
    let dir = tempfile::tempdir().unwrap();
    let mut full = state(&cfg);
    let opts = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    run(&mut full, &opts).unwrap();
    let reference = std::fs::read(checkpoint_path(dir.path(), 10)).unwrap();

    let ck = Checkpoint::load(&checkpoint_path(dir.path(), 5)).unwrap();
    let mut resumed = TrainState::from_checkpoint(&ck).unwrap();
    assert_eq!(resumed.iteration, 5);
    assert_eq!(resumed.opt_f.as_ref().unwrap().steps(), 20);
    let dir2 = tempfile::tempdir().unwrap();
    let opts2 = TrainOptions {
        out_dir: Some(dir2.path().to_path_buf()),
        ..Default::default()
    };
    run(&mut resumed, &opts2).unwrap();
    assert_eq!(std::fs::read(checkpoint_path(dir2.path(), 10)).unwrap(), reference);
}

#[test]
fn non_finite_loss_aborts_with_snapshot() {
    let cfg = tiny_cfg();
    let dir = tempfile::tempdir().unwrap();
    let mut s = state(&cfg);
    s.train_iteration().unwrap();
    let name = s.d.params.names().next().unwrap().clone();
    let t = s.d.params.get_mut(&name).unwrap();
    *t = Tensor::full(t.shape(), f32::NAN);
    s.snapshot_dir = Some(dir.path().to_path_buf());
    match s.train_iteration() {
        Err(PirError::Diverged {
            iteration,
            phase,
            snapshot,
            ..
        }) => {
            assert_eq!(iteration, 1);
            assert_eq!(phase, "discriminator");
            let snap = Checkpoint::load(&snapshot.expect("snapshot written")).unwrap();
            assert_eq!(snap.meta.iteration, 1);
        }
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn final_checkpoint_carries_metrics() {
    let mut cfg = tiny_cfg();
    cfg.iterations = 2;
    cfg.checkpoint_interval = 0;
    cfg.eval_samples = 12;
    let (g_s, target) = fixtures(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        eval: Some(pir_core::trainer::EvalData {
            real: target.images.clone(),
            seed: 9,
        }),
        ..Default::default()
    };
    let (_, out) = pir_core::trainer::train(&g_s, &target, &cfg, &opts).unwrap();
    assert_eq!(out.checkpoints.len(), 1);
    let ck = Checkpoint::load(&out.checkpoints[0]).unwrap();
    let m = ck.meta.metrics.expect("metrics in final checkpoint");
    assert_eq!(m.sample_count, 12);
    assert!(m.fid.is_finite() && m.fid >= 0.0);
    assert_eq!(Some(m), out.metrics);
}
