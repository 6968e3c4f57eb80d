//! End-to-end runs of the `pir` binary on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
resolution = 16
z_dim = 8
batch_size = 2
k_shot = 4
iterations = 3
f_steps_per_iter = 1
f_warmup_steps = 2
checkpoint_interval = 2
eval_samples = 12

[arch]
w_dim = 8
mapping_layers = 1
gen_channels = [8, 8, 4, 4]
disc_channels = [4, 4, 8, 8]
content_channels = 4
translator_channels = 4
style_dim = 4
"#;

fn pir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pir"))
        .args(args)
        .env_remove("PIR_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn pir")
}

fn ok(args: &[&str]) -> String {
    let out = pir(args);
    assert!(
        out.status.success(),
        "pir {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// PNG width and height from the IHDR chunk.
fn png_size(path: &Path) -> (u32, u32) {
    let b = std::fs::read(path).unwrap();
    assert_eq!(&b[1..4], b"PNG");
    let word = |o: usize| u32::from_be_bytes(b[o..o + 4].try_into().unwrap());
    (word(16), word(20))
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    source: PathBuf,
}

fn setup() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    ok(&["make-toy", "--out", s(&root.join("toy")), "--resolution", "16", "--count", "24", "--seed", "3"]);
    let source = root.join("source.pir");
    ok(&["pretrain-source", "--config", s(&config), "--out", s(&source), "--steps", "20"]);
    Workspace {
        _dir: dir,
        root,
        config,
        source,
    }
}

#[test]
fn full_pipeline() {
    let w = setup();
    let toy = w.root.join("toy");
    assert_eq!(std::fs::read_dir(toy.join("target")).unwrap().count(), 24);
    assert!(toy.join("source-manifest.toml").is_file());

    let run = w.root.join("run");
    let out = ok(&[
        "adapt",
        "--config",
        s(&w.config),
        "--source",
        s(&w.source),
        "--data",
        s(&toy.join("target")),
        "--out",
        s(&run),
        "--eval-data",
        s(&toy.join("target")),
    ]);
    assert!(out.contains("pir@3"), "{out}");
    let last = run.join("ckpt-000003.pir");
    assert!(run.join("ckpt-000002.pir").is_file() && last.is_file());
    assert_eq!(std::fs::read_to_string(run.join("losses.jsonl")).unwrap().lines().count(), 3);

    let table = ok(&["eval", s(&last), s(&run.join("ckpt-000002.pir")), "--real", s(&toy.join("target"))]);
    assert_eq!(table.lines().count(), 3, "{table}");
    assert!(table.lines().nth(1).unwrap().starts_with("ckpt-000003.pir"));

    let grid = w.root.join("sample.png");
    ok(&["sample", "--checkpoint", s(&last), "--out", s(&grid), "--n", "8"]);
    assert_eq!(png_size(&grid), (8 * 16, 2 * 16));

    let tgrid = w.root.join("translate.png");
    ok(&["translate", "--checkpoint", s(&last), "--out", s(&tgrid), "--n-content", "3", "--n-style", "4"]);
    assert_eq!(png_size(&tgrid), (5 * 16, 4 * 16));

    // Resume the run for two more iterations.
    ok(&["adapt", "--resume", s(&last), "--iterations", "5", "--out", s(&run)]);
    assert!(run.join("ckpt-000005.pir").is_file());
    assert_eq!(std::fs::read_to_string(run.join("losses.jsonl")).unwrap().lines().count(), 5);
}

#[test]
fn baseline_has_no_translator() {
    let w = setup();
    let run = w.root.join("base");
    let out = ok(&[
        "adapt",
        "--baseline",
        "--config",
        s(&w.config),
        "--source",
        s(&w.source),
        "--data",
        s(&w.root.join("toy/target")),
        "--out",
        s(&run),
        "--iterations",
        "2",
    ]);
    assert!(out.contains("ckpt-000002.pir"), "{out}");
    let res = pir(&[
        "translate",
        "--checkpoint",
        s(&run.join("ckpt-000002.pir")),
        "--out",
        s(&w.root.join("t.png")),
    ]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[loss]\nlambda1 = -1.0\n").unwrap();
    let out = dir.path().join("x.pir");

    // Invalid config from a file, a flag, or the environment.
    let r = pir(&["pretrain-source", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    let r = pir(&["pretrain-source", "--resolution", "48", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    let r = Command::new(env!("CARGO_BIN_EXE_pir"))
        .args(["pretrain-source", "--out", s(&out)])
        .env("PIR_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(1));
    let r = pir(&["pretrain-source", "--recon-metric", "sideways", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    let r = pir(&["adapt", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));

    // Runtime failure: the checkpoint does not exist.
    let r = pir(&["sample", "--checkpoint", s(&dir.path().join("missing.pir")), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));

    assert_eq!(pir(&["--help"]).status.code(), Some(0));
}

#[test]
fn snake_case_aliases_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("s.pir");
    ok(&["pretrain-source", "--config", s(&cfg), "--z_dim", "8", "--k_shot", "2", "--out", s(&out), "--steps", "2"]);
    assert!(out.is_file());
}
