use std::path::Path;
use std::process::{Command, Output};

fn rnnorm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rnnorm")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

const SMALL_ALIGN: &[&str] = &[
    "--set",
    "model.hidden=6",
    "--set",
    "model.layers=1",
    "--set",
    "task.sequences=50",
    "--set",
    "task.valid=10",
    "--set",
    "task.min_len=4",
    "--set",
    "task.max_len=12",
    "--set",
    "train.lr=0.05",
    "--set",
    "train.epochs=2",
];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn lists_presets() {
    let dir = tempfile::tempdir().unwrap();
    let out = rnnorm(&["presets"], dir.path());
    assert!(out.status.success());
    let names = text(&out.stdout);
    for p in ["appendix-a-baseline", "appendix-a-bn", "ptb-small", "ptb-medium", "ptb-large", "wsj-like"] {
        assert!(names.lines().any(|l| l == p), "{p} missing");
    }
}

#[test]
fn invalid_spec_lists_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let out = rnnorm(
        &["train", "--preset", "ptb-small", "--set", "bn.axis=sequence-wise", "--set", "model.bidirectional=true", "--set", "train.momentum=2"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    for field in ["bn.axis", "model.bidirectional", "train.momentum"] {
        assert!(err.contains(field), "{field} not reported: {err}");
    }
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = rnnorm(&with(&["train", "--preset", "wsj-like", "--out", "run"], SMALL_ALIGN), dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(text(&out.stdout).lines().filter(|l| l.starts_with("epoch")).count(), 2);
    let run = dir.path().join("run");
    for f in ["metrics.csv", "best.ckpt", "last.ckpt", "spec.ini"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let eval = |bs: &str, out: &str| {
        let o = rnnorm(&["eval", "--checkpoint", "run/last.ckpt", "--batch-size", bs, "--out", out], dir.path());
        assert!(o.status.success(), "{}", text(&o.stderr));
        o.stdout
    };
    let a = eval("1", "e1");
    let b = eval("1", "e1b");
    let c = eval("32", "e32");
    assert_eq!(a, b);
    assert_eq!(a, c);
    let seqs = |d: &str| std::fs::read(dir.path().join(d).join("eval-valid-sequences.csv")).unwrap();
    assert_eq!(seqs("e1"), seqs("e32"));
    assert_eq!(seqs("e1").iter().filter(|&&c| c == b'\n').count(), 11);

    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let last_valid = metrics.lines().filter(|l| l.contains(",valid,")).last().unwrap();
    assert_eq!(text(&a).lines().nth(1), Some(last_valid));
}

#[test]
fn same_seed_same_metrics() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = rnnorm(&with(&["train", "--preset", "wsj-like", "--seed", "5", "--set", "train.dropout=0.3", "--out", out], SMALL_ALIGN), dir.path());
        assert!(o.status.success(), "{}", text(&o.stderr));
    }
    let read = |d: &str| std::fs::read(dir.path().join(d).join("metrics.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    let o = rnnorm(&with(&["train", "--preset", "wsj-like", "--seed", "6", "--set", "train.dropout=0.3", "--out", "c"], SMALL_ALIGN), dir.path());
    assert!(o.status.success());
    assert_ne!(read("a"), read("c"));
}

#[test]
fn missing_statistics_name_the_layer() {
    let dir = tempfile::tempdir().unwrap();
    let capped = with(
        &["train", "--preset", "wsj-like", "--set", "bn.axis=frame-wise", "--set", "task.max_frames=5", "--out", "capped"],
        SMALL_ALIGN,
    );
    let o = rnnorm(&capped, dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("layer1.fwd.bn"), "{}", text(&o.stderr));

    let o = rnnorm(&with(&["train", "--preset", "wsj-like", "--set", "bn.axis=frame-wise", "--out", "fw"], SMALL_ALIGN), dir.path());
    assert!(o.status.success(), "{}", text(&o.stderr));
    let o = rnnorm(&["eval", "--checkpoint", "fw/last.ckpt", "--set", "task.min_len=30", "--set", "task.max_len=30"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("layer1.fwd.bn"), "{}", text(&o.stderr));
}

#[test]
fn gradcheck_passes_and_catches_a_broken_backward() {
    let dir = tempfile::tempdir().unwrap();
    let small = [
        "--set", "model.hidden=5", "--set", "model.layers=1", "--set", "task.features=3", "--set", "task.min_len=4",
        "--set", "task.max_len=4", "--set", "task.sequences=20", "--set", "task.valid=5",
    ];
    for preset in ["wsj-like-baseline", "wsj-like"] {
        let o = rnnorm(&with(&["gradcheck", "--preset", preset], &small), dir.path());
        assert!(o.status.success(), "{preset}: {}", text(&o.stdout));
        assert!(text(&o.stdout).contains("input-to-hidden/sequence-wise"));
    }
    let o = rnnorm(&with(&["gradcheck", "--preset", "wsj-like", "--corrupt-backward"], &small), dir.path());
    assert_eq!(o.status.code(), Some(4));
    assert!(text(&o.stdout).contains("FAIL"));

    let o = rnnorm(&["gradcheck", "--preset", "wsj-like"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("model.hidden"));
}

#[test]
fn sweep_writes_one_row_per_trial() {
    let dir = tempfile::tempdir().unwrap();
    let args = with(
        &["sweep", "--preset", "wsj-like", "--trials", "3", "--batch-sizes", "8,16", "--momenta", "0.5,0.9", "--set", "train.epochs=1", "--out", "sw"],
        SMALL_ALIGN,
    );
    let o = rnnorm(&args, dir.path());
    assert!(o.status.success(), "{}", text(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sw/results.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        let cols: Vec<&str> = r.split(',').collect();
        assert!(["0.5", "0.9"].contains(&cols[2]), "{r}");
        assert!(["8", "16"].contains(&cols[3]), "{r}");
    }
}

#[test]
fn paired_sweep_over_placements() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "sweep", "--preset", "appendix-a-baseline", "--placements", "none,pre-activation", "--trials", "2",
        "--set", "task.synth_chars=6000", "--set", "model.hidden=8", "--set", "model.layers=1", "--set", "model.embedding=8",
        "--set", "train.bptt=10", "--set", "train.epochs=1", "--batch-sizes", "8", "--out", "cmp",
    ];
    let o = rnnorm(&args, dir.path());
    assert!(o.status.success(), "{}", text(&o.stderr));
    for f in ["results-none.csv", "results-pre-activation.csv", "comparison.txt"] {
        assert!(dir.path().join("cmp").join(f).exists(), "{f}");
    }
    let lrs = |f: &str| {
        let mut v: Vec<String> = std::fs::read_to_string(dir.path().join("cmp").join(f))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().to_string())
            .collect();
        v.sort();
        v
    };
    assert_eq!(lrs("results-none.csv"), lrs("results-pre-activation.csv"));
}
