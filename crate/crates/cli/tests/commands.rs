use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use doge_cli::manifest::{sha256_file, RunManifest};

/// Small enough that every stage runs in well under a second.
const TINY: &str = "\
corpus.size = 300
teacher.hidden = 32
proxies.dims = 16
sft.steps = 40
sft.batch_size = 16
sft.pool_size = 120
train.steps = 6
train.batch_size = 8
train.lambda = 0.1
student.hidden = 16
student.epochs = 1
gap.seeds = 1
eval.limit = 12
theory.discrepancy_trials = 20
theory.one_step_trials = 10
theory.range_trials = 200
landscape.grid_size = 5
landscape.batch = 4
";

fn doge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_doge"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn doge")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Lab {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Lab {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_owned();
        std::fs::write(root.join("tiny.cfg"), TINY).unwrap();
        Self { _tmp: tmp, root }
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut all = vec!["--config", "tiny.cfg"];
        all.extend_from_slice(args);
        doge(&self.root, &all)
    }

    /// Corpus plus SFT teacher and proxy in `base/`.
    fn prepared(&self) {
        ok(&self.run(&["--out", "base", "gen-corpus"]));
        ok(&self.run(&["--out", "base", "--set", "input.corpus=base/corpus.txt", "train-sft"]));
    }
}

#[test]
fn unknown_key_is_named_in_the_error() {
    let lab = Lab::new();
    let o = lab.run(&["--set", "train.lamda=0.1", "gen-corpus"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.lamda"));
    std::fs::write(lab.root.join("bad.cfg"), "student.widht = 3\n").unwrap();
    let o = doge(&lab.root, &["--config", "bad.cfg", "gen-corpus"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("student.widht"));
}

#[test]
fn missing_input_names_the_key() {
    let lab = Lab::new();
    let o = lab.run(&["--out", "x", "eval"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("input.model"));
    let o = lab.run(&["--out", "x", "--set", "input.model=nope.ckpt", "eval"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("input.model"));
}

#[test]
fn set_overrides_file_and_seed_reaches_streams() {
    let lab = Lab::new();
    ok(&lab.run(&["--out", "a", "--seed", "5", "--set", "corpus.size=50", "gen-corpus"]));
    let m = RunManifest::load(&lab.root.join("a/gen-corpus.manifest.json")).unwrap();
    assert_eq!(m.seed, 5);
    assert!(m.config.contains("corpus.size = 50\n") && m.config.contains("corpus.seed = 5\n"));
    let lines = std::fs::read_to_string(lab.root.join("a/corpus.txt")).unwrap().lines().count();
    assert_eq!(lines, 50);
}

#[test]
fn verify_bounds_exits_zero_without_violations() {
    let lab = Lab::new();
    let o = lab.run(&["--out", "b", "verify-bounds"]);
    let text = ok(&o);
    assert!(text.contains("no violations"), "{text}");
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(lab.root.join("b/bounds.json")).unwrap()).unwrap();
    assert_eq!(doc["violations"], 0);
}

#[test]
fn pipeline_stages_and_rerun_reproduce_bitwise() {
    let lab = Lab::new();
    lab.prepared();
    let defend = [
        "--out",
        "def",
        "--set",
        "input.corpus=base/corpus.txt",
        "--set",
        "input.teacher=base/teacher.ckpt",
        "--set",
        "input.proxies=base/proxy_0.ckpt",
        "train-defense",
    ];
    ok(&lab.run(&defend));
    let ckpt = lab.root.join("def/defended.ckpt");
    let first = sha256_file(&ckpt).unwrap();
    std::fs::remove_file(&ckpt).unwrap();
    let text = ok(&doge(&lab.root, &["rerun", "def/train-defense.manifest.json", "--out", "def2"]));
    assert!(text.contains("bit for bit"), "{text}");
    assert_eq!(sha256_file(&lab.root.join("def2/defended.ckpt")).unwrap(), first);

    ok(&lab.run(&[
        "--out",
        "kd",
        "--set",
        "input.corpus=base/corpus.txt",
        "--set",
        "input.teacher=def/../def2/defended.ckpt",
        "distill",
    ]));
    assert!(lab.root.join("kd/kd_data.jsonl.provenance.json").exists());
    let text = ok(&lab.run(&[
        "--out",
        "ev",
        "--set",
        "input.corpus=base/corpus.txt",
        "--set",
        "input.model=kd/student.ckpt",
        "eval",
    ]));
    assert!(text.starts_with("eval: accuracy"));

    let text = ok(&lab.run(&[
        "--out",
        "gap",
        "--set",
        "input.corpus=base/corpus.txt",
        "--set",
        "input.teacher=base/teacher.ckpt",
        "--set",
        "input.defended=def2/defended.ckpt",
        "gap-report",
    ]));
    assert!(text.starts_with("gap-report:"));
    let gap: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(lab.root.join("gap/gap_report.json")).unwrap()).unwrap();
    for key in [
        "teacher_sft_acc",
        "teacher_defensive_acc",
        "student_from_sft_acc",
        "student_from_defensive_acc",
        "teacher_delta",
        "student_delta",
    ] {
        assert!(gap[key].is_f64(), "{key}");
    }

    ok(&lab.run(&[
        "--out",
        "ls",
        "--set",
        "input.corpus=base/corpus.txt",
        "--set",
        "input.teacher=def2/defended.ckpt",
        "--set",
        "input.proxies=base/proxy_0.ckpt",
        "--set",
        "input.log=def2/train_log.jsonl",
        "landscape",
    ]));
    let csv = std::fs::read_to_string(lab.root.join("ls/landscape.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 25);
    assert!(csv.starts_with("x,y,loss\n"));

    // Every command replays from its manifest.
    for m in [
        "base/gen-corpus.manifest.json",
        "base/train-sft.manifest.json",
        "kd/distill.manifest.json",
        "ev/eval.manifest.json",
        "gap/gap-report.manifest.json",
        "ls/landscape.manifest.json",
    ] {
        let text = ok(&doge(&lab.root, &["rerun", m, "--out", "replay"]));
        assert!(text.contains("bit for bit"), "{m}: {text}");
    }
}

#[test]
fn rerun_refuses_changed_inputs() {
    let lab = Lab::new();
    lab.prepared();
    std::fs::write(lab.root.join("base/corpus.txt"), "").unwrap();
    let o = doge(&lab.root, &["rerun", "base/train-sft.manifest.json", "--out", "r"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("inputs changed"));
}
