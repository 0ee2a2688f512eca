use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use replaylens_cli::manifest::{sha256_file, Manifest};

const SMALL: &str = r#"{
  "model": {"layers": 2, "d_model": 16, "heads": 2, "vocab": 16, "max_seq": 12, "visual_dim": 6, "d_ff": 32},
  "task": {"visual_tokens": 4, "digits": 2, "visual_dim": 6, "content_dims": 4},
  "train": {"steps": 40, "batch_size": 4, "held_out_tasks": 20, "min_accuracy": 0.0},
  "tune": {"mode": "seeded_corruption", "scale": 0.5, "seed": 3},
  "replay": {"tau": 1.0},
  "dataset_size": 12,
  "perturbation": {"scales": [0.1, 0.3], "seeds": [0, 1, 2]},
  "passk": {"k": 4},
  "ablation": {"taus": [0.4, 1.0], "alphas": [0.0, 5.0]}
}"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("small.json"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_replaylens"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("REPLAYLENS_SEED")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn pair(&self) {
        self.ok(&["train-pair", "--config", "small.json", "--out", "pair"]);
    }
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn train_pair_is_deterministic_and_hashed() {
    let env = Env::new();
    env.pair();
    env.ok(&["train-pair", "--config", "small.json", "--out", "again"]);
    for f in ["base.ckpt", "tuned.ckpt", "loss_curve.csv", "manifest.json"] {
        assert_eq!(
            std::fs::read(env.path("pair").join(f)).unwrap(),
            std::fs::read(env.path("again").join(f)).unwrap(),
            "{f}"
        );
    }
    let m = Manifest::load(&env.path("pair/manifest.json")).unwrap();
    for f in &m.outputs {
        assert_eq!(sha256_file(&env.path("pair").join(&f.path)).unwrap(), f.sha256);
    }
    assert!(m.outputs.iter().any(|f| f.path == Path::new("base.ckpt")));
    assert!(m.outputs.iter().any(|f| f.path == Path::new("tuned.ckpt")));
    assert!(m.summary["held_out_accuracy"].is_number());
}

#[test]
fn report_commands_cover_the_dataset_and_rerun_exactly() {
    let env = Env::new();
    env.pair();
    let before = sha256_file(&env.path("pair/base.ckpt")).unwrap();
    let cases = [
        ("lens-report", "lens_tasks.jsonl", 12),
        ("replay-eval", "replay.jsonl", 12),
        ("intervene", "intervention.jsonl", 12),
        ("perturb", "perturbation.jsonl", 6),
        ("passk", "passk.jsonl", 12),
        ("ablate", "ablation.jsonl", 4),
    ];
    for (cmd, file, rows) in cases {
        env.ok(&[cmd, "--config", "small.json", "--pair", "pair", "--out", cmd]);
        assert_eq!(lines(&env.path(cmd).join(file)), rows, "{cmd}");
        let again = format!("{cmd}-rerun");
        let out = env.ok(&["rerun", "--manifest", &format!("{cmd}/manifest.json"), "--out", &again]);
        assert!(String::from_utf8_lossy(&out.stdout).contains("reproduced"));
        let m = Manifest::load(&env.path(cmd).join("manifest.json")).unwrap();
        for f in &m.outputs {
            assert_eq!(
                std::fs::read(env.path(cmd).join(&f.path)).unwrap(),
                std::fs::read(env.path(&again).join(&f.path)).unwrap()
            );
        }
    }
    assert_eq!(sha256_file(&env.path("pair/base.ckpt")).unwrap(), before);
    assert!(std::fs::read_to_string(env.path("passk/passk.svg")).unwrap().starts_with("<svg"));
    assert!(std::fs::read_to_string(env.path("lens-report/heatmap.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn flags_and_environment_override_the_config() {
    let env = Env::new();
    env.pair();
    env.ok(&["replay-eval", "--config", "small.json", "--pair", "pair", "--tau", "0.5", "--alpha", "2", "--out", "r"]);
    let m = Manifest::load(&env.path("r/manifest.json")).unwrap();
    assert_eq!(m.config.replay.tau, 0.5);
    assert_eq!(m.config.replay.alpha, 2.0);

    let seeded = |extra: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_replaylens"));
        cmd.args(["passk", "--config", "small.json", "--pair", "pair", "--out", "p"])
            .args(extra)
            .current_dir(env.dir.path())
            .env("REPLAYLENS_SEED", "11");
        assert!(cmd.output().unwrap().status.success());
        Manifest::load(&env.path("p/manifest.json")).unwrap().config.seed
    };
    assert_eq!(seeded(&[]), 11);
    assert_eq!(seeded(&["--seed", "12"]), 12);
}

#[test]
fn failures_map_to_exit_codes() {
    let env = Env::new();
    env.pair();
    let code = |args: &[&str]| env.run(args).status.code().unwrap();

    let missing = env.run(&["replay-eval", "--config", "small.json", "--pair", "absent", "--out", "x"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent"));

    std::fs::write(env.path("empty.jsonl"), "").unwrap();
    let empty = env.run(&["passk", "--config", "small.json", "--pair", "pair", "--dataset", "empty.jsonl", "--out", "x"]);
    assert_eq!(empty.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&empty.stderr).contains("empty"));

    std::fs::write(env.path("bad.json"), r#"{"sede": 1}"#).unwrap();
    assert_eq!(code(&["ablate", "--config", "bad.json", "--pair", "pair", "--out", "x"]), 2);
    assert_eq!(code(&["replay-eval", "--config", "small.json", "--pair", "pair", "--tau", "0", "--out", "x"]), 2);

    std::fs::write(env.path("strict.json"), SMALL.replace(r#""min_accuracy": 0.0"#, r#""min_accuracy": 1.0"#)).unwrap();
    let failed = env.run(&["train-pair", "--config", "strict.json", "--out", "failed"]);
    assert_eq!(failed.status.code(), Some(4));
    assert!(lines(&env.path("failed/loss_curve.csv")) > 1);

    let mut bytes = std::fs::read(env.path("pair/tuned.ckpt")).unwrap();
    bytes.push(0);
    std::fs::create_dir_all(env.path("broken")).unwrap();
    std::fs::copy(env.path("pair/base.ckpt"), env.path("broken/base.ckpt")).unwrap();
    std::fs::write(env.path("broken/tuned.ckpt"), bytes).unwrap();
    assert_eq!(code(&["intervene", "--config", "small.json", "--pair", "broken", "--out", "x"]), 3);
}

#[test]
fn rerun_detects_changed_inputs() {
    let env = Env::new();
    env.pair();
    env.ok(&["intervene", "--config", "small.json", "--pair", "pair", "--out", "i"]);
    env.ok(&["train-pair", "--config", "small.json", "--corruption-scale", "0.9", "--out", "pair"]);
    let out = env.run(&["rerun", "--manifest", "i/manifest.json", "--out", "i2"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("changed"));
}
