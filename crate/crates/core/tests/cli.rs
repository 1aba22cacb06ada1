use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use protopool::cli::ABLATION_HEADER;
use protopool::dataio::read_dataset;
use protopool::training::{load_checkpoint, Phase, METRICS_HEADER};

fn protopool(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protopool"))
        .current_dir(dir)
        .env("PROTOPOOL_THREADS", "2")
        .args(args)
        .output()
        .expect("spawn protopool")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = protopool(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    protopool(dir, args).status.code().unwrap()
}

const SYNTH: &[&str] = &[
    "synth",
    "--classes", "4",
    "--parts", "8",
    "--parts-per-class", "2",
    "--samples-per-class", "8",
    "--height", "5",
    "--width", "5",
    "--depth", "8",
    "--seed", "5",
];

fn synth(dir: &Path, name: &str) {
    let mut args = SYNTH.to_vec();
    args.extend(["-o", name]);
    ok(dir, &args);
}

const QUICK: &[&str] = &["--prototypes", "8", "--slots", "2", "--epochs", "4", "--set", "warmup_epochs=2", "--set", "finetune_epochs=1"];

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "a.ppfm");
    synth(dir.path(), "b.ppfm");
    for ext in ["ppfm", "class_parts.csv", "sample_parts.csv", "config.resolved"] {
        let a = fs::read(dir.path().join(format!("a.{ext}"))).unwrap();
        let b = fs::read(dir.path().join(format!("b.{ext}"))).unwrap();
        assert_eq!(a, b, "{ext}");
    }
    let ds = read_dataset(&dir.path().join("a.ppfm")).unwrap();
    assert_eq!((ds.len(), ds.num_classes(), ds.dims()), (32, 4, (5, 5, 8)));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["--help"]), 0);
    assert_eq!(code(d, &["frobnicate"]), 1);
    assert_eq!(code(d, &["train", "--gumbel", "sometimes"]), 1);
    assert_eq!(code(d, &["train", "--set", "no_such_key=1"]), 1);
    assert_eq!(code(d, &["train", "--set", "slots"]), 1);
    assert_eq!(code(d, &["eval", "--checkpoint", "missing.ppck", "--data", "missing.ppfm"]), 2);

    fs::write(d.join("junk.ppfm"), b"not a dataset").unwrap();
    assert_eq!(code(d, &["train", "--data", "junk.ppfm"]), 2);

    synth(d, "s.ppfm");
    // model dimensions that disagree with the data
    assert_eq!(code(d, &["train", "--data", "s.ppfm", "--classes", "3", "--epochs", "0"]), 2);
    assert_eq!(code(d, &["train", "--data", "s.ppfm", "--set", "height=6", "--epochs", "0"]), 2);
    assert_eq!(code(d, &["train", "--data", "s.ppfm", "--set", "val_fraction=1.5"]), 1);
}

#[test]
fn train_eval_project_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "s.ppfm");
    let mut args = vec!["train", "--data", "s.ppfm", "--out", "run"];
    args.extend(QUICK);
    let stdout = ok(d, &args);
    assert!(stdout.contains("val_accuracy"));
    for f in ["checkpoint.ppck", "metrics.csv", "projection.csv", "config.resolved"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some(METRICS_HEADER));

    let eval = ok(d, &["eval", "--checkpoint", "run/checkpoint.ppck", "--data", "s.ppfm", "--per-class"]);
    assert!(eval.starts_with("accuracy "));
    assert_eq!(eval.lines().filter(|l| l.starts_with("class ")).count(), 4);

    ok(d, &["project", "--checkpoint", "run/checkpoint.ppck", "--data", "s.ppfm", "-o", "proj.ppck"]);
    assert_eq!(load_checkpoint(&d.join("proj.ppck")).unwrap().phase, Phase::Projection);

    let ck = "run/checkpoint.ppck";
    for (kind, file) in [
        ("assignment", "assignment.csv"),
        ("histogram", "histogram.csv"),
        ("sharing", "sharing.csv"),
        ("graph", "graph.csv"),
    ] {
        ok(d, &["analyze", kind, "--checkpoint", ck, "--out", "an"]);
        let text = fs::read_to_string(d.join("an").join(file)).unwrap();
        assert!(text.lines().count() >= 2, "{kind}: {text}");
    }
    ok(d, &["analyze", "activation", "--checkpoint", ck, "--data", "s.ppfm", "--sample", "3", "--prototype", "1", "--out", "an"]);
    assert!(d.join("an/activation_s3_p1.pgm").exists());
    assert!(d.join("an/activation_s3_p1.csv").exists());
    let corr = ok(d, &["analyze", "correlation", "--checkpoint", ck, "--data", "s.ppfm", "--out", "an"]);
    assert!(corr.contains("spearman"));

    assert_eq!(code(d, &["analyze", "activation", "--checkpoint", ck, "--out", "an"]), 1);
    assert_eq!(code(d, &["analyze", "activation", "--checkpoint", ck, "--data", "s.ppfm", "--prototype", "99"]), 1);
}

#[test]
fn resolved_config_reproduces_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "s.ppfm");
    let mut args = vec!["train", "--data", "s.ppfm", "--out", "first", "--gumbel", "classic", "--seed", "9"];
    args.extend(QUICK);
    ok(d, &args);
    ok(d, &["train", "-c", "first/config.resolved", "--out", "second"]);
    let read = |p: &str| fs::read(d.join(p)).unwrap();
    assert_eq!(read("first/metrics.csv"), read("second/metrics.csv"));
    assert_eq!(read("first/checkpoint.ppck"), read("second/checkpoint.ppck"));
    let resolved = fs::read_to_string(d.join("second/config.resolved")).unwrap();
    assert!(resolved.contains("gumbel=classic"));
    assert!(resolved.contains("out=second"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "s.ppfm");
    fs::write(d.join("base.cfg"), "# quick run\ndata=s.ppfm\nprototypes=8\nslots=2\nepochs=0\nseed=1\n").unwrap();
    ok(d, &["train", "-c", "base.cfg", "--set", "seed=2", "--seed", "3", "--out", "r"]);
    let resolved = fs::read_to_string(d.join("r/config.resolved")).unwrap();
    assert!(resolved.lines().any(|l| l == "seed=3"), "{resolved}");
    assert!(resolved.lines().any(|l| l == "prototypes=8"));
}

#[test]
fn ablation_writes_one_row_per_arm() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "s.ppfm");
    let mut args = vec!["ablate", "--data", "s.ppfm", "--out", "abl"];
    args.extend(QUICK);
    ok(d, &args);
    let table = fs::read_to_string(d.join("abl/ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], ABLATION_HEADER);
    let arms: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(arms, ["full", "no_gumbel", "no_orth", "no_focal"]);
    for arm in arms {
        assert!(d.join("abl").join(arm).join("checkpoint.ppck").exists());
    }
    let no_orth = fs::read_to_string(d.join("abl/no_orth/config.resolved")).unwrap();
    assert!(no_orth.lines().any(|l| l == "orth=off"));
}
