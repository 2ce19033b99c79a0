//! End-to-end tests of the tide binary: exit codes, file contracts,
//! determinism, and the overwrite/resume/fault-injection behaviors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_tide")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("spawn tide binary")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "tide {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Tiny world: 10 drugs (5/2/3 split), 16x16 images, gene references.
fn synth_args(ds: &Path, seed: &str) -> Vec<String> {
    [
        "synth",
        "--dataset-dir",
        ds.to_str().unwrap(),
        "--seed",
        seed,
        "--set",
        "synth.n_drugs=10",
        "--set",
        "synth.n_val_drugs=2",
        "--set",
        "synth.n_test_drugs=3",
        "--set",
        "synth.wells_per_drug=3",
        "--set",
        "synth.images_per_well=2",
        "--set",
        "synth.n_genes=8",
        "--set",
        "synth.gene_wells_per_gene=2",
        "--set",
        "synth.image_shape=[3,16,16]",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn train_args(ds: &Path, sur: &Path, ckpt: &Path, epochs: &str) -> Vec<String> {
    [
        "train",
        "--dataset-dir",
        ds.to_str().unwrap(),
        "--surrogate-dir",
        sur.to_str().unwrap(),
        "--checkpoint-dir",
        ckpt.to_str().unwrap(),
        "--seed",
        "7",
        "--epochs",
        epochs,
        "--set",
        "train.d=16",
        "--set",
        "train.batch_size=16",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// Dataset + frozen surrogate shared by the read-only tests.
fn fixture() -> &'static (TempDir, PathBuf, PathBuf) {
    static FIX: OnceLock<(TempDir, PathBuf, PathBuf)> = OnceLock::new();
    FIX.get_or_init(|| {
        let dir = TempDir::new().expect("tempdir");
        let ds = dir.path().join("ds");
        let sur = dir.path().join("sur");
        ok(&strs(&synth_args(&ds, "7")));
        ok(&[
            "train-scfm",
            "--dataset-dir",
            ds.to_str().unwrap(),
            "--surrogate-dir",
            sur.to_str().unwrap(),
            "--seed",
            "7",
            "--epochs",
            "40",
        ]);
        (dir, ds, sur)
    })
}

fn read_json(path: &Path) -> serde_json::Value {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("read {path:?}: {e}"));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("parse {path:?}: {e}"))
}

#[test]
fn missing_dataset_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let nope = tmp.path().join("nope");
    let out = run(&[
        "train",
        "--dataset-dir",
        nope.to_str().unwrap(),
        "--surrogate-dir",
        nope.to_str().unwrap(),
        "--checkpoint-dir",
        tmp.path().join("ckpt").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("manifest"),
        "stderr should name the missing manifest: {}",
        stderr(&out)
    );
}

#[test]
fn synth_same_seed_is_bit_identical() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&strs(&synth_args(&a, "11")));
    ok(&strs(&synth_args(&b, "11")));
    for file in ["manifest.json", "arrays.f32"] {
        let fa = fs::read(a.join(file)).unwrap();
        let fb = fs::read(b.join(file)).unwrap();
        assert_eq!(fa, fb, "{file} differs between identical-seed runs");
    }
}

#[test]
fn synth_refuses_overwrite_without_force() {
    let tmp = TempDir::new().unwrap();
    let ds = tmp.path().join("ds");
    ok(&strs(&synth_args(&ds, "5")));
    let again = run(&strs(&synth_args(&ds, "5")));
    assert_eq!(code(&again), 2);
    assert!(
        stderr(&again).contains("--force"),
        "refusal should mention --force: {}",
        stderr(&again)
    );
    let mut forced = synth_args(&ds, "5");
    forced.push("--force".to_string());
    ok(&strs(&forced));
}

#[test]
fn config_file_flags_and_overrides_compose() {
    let tmp = TempDir::new().unwrap();
    let ds = tmp.path().join("ds");
    let cfg_path = tmp.path().join("run.json");
    fs::write(
        &cfg_path,
        r#"{
  "synth": {
    "n_drugs": 12,
    "n_val_drugs": 2,
    "n_test_drugs": 3,
    "wells_per_drug": 3,
    "images_per_well": 2,
    "n_genes": 8,
    "gene_wells_per_gene": 2,
    "image_shape": [3, 16, 16]
  }
}"#,
    )
    .unwrap();
    ok(&[
        "synth",
        "--config",
        cfg_path.to_str().unwrap(),
        "--set",
        "synth.n_drugs=10",
        "--seed",
        "9",
        "--dataset-dir",
        ds.to_str().unwrap(),
    ]);
    let echo = read_json(&ds.join("run_config.json"));
    assert_eq!(echo["command"], "synth");
    assert_eq!(echo["config"]["synth"]["n_drugs"], 10, "--set beats the file");
    assert_eq!(echo["config"]["synth"]["wells_per_drug"], 3, "file beats defaults");
    assert_eq!(echo["config"]["seed"], 9);
    assert_eq!(echo["config"]["synth"]["seed"], 9, "master seed propagates");
    let hash = echo["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 16, "config hash is a 16-hex-digit fnv fingerprint");

    let unknown = run(&[
        "synth",
        "--set",
        "synth.no_such_field=1",
        "--dataset-dir",
        ds.to_str().unwrap(),
        "--force",
    ]);
    assert_eq!(code(&unknown), 2, "unknown fields are rejected, not ignored");
}

#[test]
fn pipeline_end_to_end() {
    let (_, ds, sur) = fixture();
    let tmp = TempDir::new().unwrap();
    let ckpt = tmp.path().join("ckpt");
    let rep = tmp.path().join("rep");
    let summary = tmp.path().join("summary");

    ok(&strs(&train_args(ds, sur, &ckpt, "3")));
    for f in ["manifest.json", "params.f32", "resume.f64", "train_log.csv"] {
        assert!(ckpt.join(f).exists(), "missing checkpoint file {f}");
    }
    let log = fs::read_to_string(ckpt.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,l_total,l_distill,l_teacher,l_ssl,l_aux,knn_acc"));

    ok(&[
        "eval-oneshot",
        "--dataset-dir",
        ds.to_str().unwrap(),
        "--checkpoint-dir",
        ckpt.to_str().unwrap(),
        "--report-dir",
        rep.to_str().unwrap(),
        "--seed",
        "7",
        "--runs",
        "5",
    ]);
    let oneshot = read_json(&rep.join("oneshot_report.json"));
    assert_eq!(oneshot["kind"], "oneshot_report");
    assert_eq!(oneshot["split"], "test");
    assert_eq!(oneshot["n_classes"], 3);
    assert_eq!(oneshot["n_runs"], 5);
    let top1 = oneshot["top1_mean"].as_f64().unwrap();
    let top5 = oneshot["top5_mean"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&top1), "top1 {top1} out of range");
    assert!(top5 >= top1, "top5 {top5} below top1 {top1}");
    let echo = read_json(&rep.join("run_config.json"));
    assert_eq!(oneshot["run_config_hash"], echo["config_hash"]);
    let emb = fs::read_to_string(rep.join("embeddings.csv")).unwrap();
    assert!(emb.starts_with("sample_id,drug_id,label,e0,"));

    ok(&[
        "eval-target",
        "--dataset-dir",
        ds.to_str().unwrap(),
        "--checkpoint-dir",
        ckpt.to_str().unwrap(),
        "--report-dir",
        rep.to_str().unwrap(),
        "--seed",
        "7",
        "--target-seeds",
        "20",
    ]);
    let target = read_json(&rep.join("target_report.json"));
    assert_eq!(target["kind"], "target_report");
    assert_eq!(target["n_seeds"], 20);
    for key in ["ap", "auc", "hit_at_1", "hit_at_5"] {
        let v = target["dose_avg"][key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "dose_avg.{key} = {v} out of range");
    }
    let perm = target["permutation_ap"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&perm));

    ok(&[
        "report",
        "--report-dir",
        summary.to_str().unwrap(),
        rep.to_str().unwrap(),
        ckpt.to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(summary.join("summary.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "run,method,metric,value");
    assert_eq!(lines.len(), 1 + 2 * 10, "one row per (run, metric)");
    assert!(csv.contains(",tide,oneshot_top1_mean,"));
    assert!(csv.contains(",tide,target_ap,"));
    assert!(
        csv.lines().any(|l| l.contains(",best_knn,") && !l.ends_with("absent")),
        "checkpoint dir contributes best_knn"
    );
    for png in ["oneshot_bar.png", "target_bar.png", "embedding_scatter.png"] {
        let bytes = fs::read(summary.join(png)).unwrap();
        assert!(bytes.len() > 1000, "{png} suspiciously small");
    }
}

#[test]
fn eval_rejects_checkpoint_from_other_dataset() {
    let (_, ds, sur) = fixture();
    let tmp = TempDir::new().unwrap();
    let other = tmp.path().join("other");
    let mut args = synth_args(&other, "7");
    for s in ["--set", "synth.n_drugs=11"] {
        args.push(s.to_string());
    }
    ok(&strs(&args));
    let ckpt = tmp.path().join("ckpt");
    ok(&strs(&train_args(ds, sur, &ckpt, "1")));
    let out = run(&[
        "eval-oneshot",
        "--dataset-dir",
        other.to_str().unwrap(),
        "--checkpoint-dir",
        ckpt.to_str().unwrap(),
        "--report-dir",
        tmp.path().join("rep").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("different dataset"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (_, ds, sur) = fixture();
    let tmp = TempDir::new().unwrap();
    let full = tmp.path().join("full");
    let halted = tmp.path().join("halted");

    ok(&strs(&train_args(ds, sur, &full, "3")));
    ok(&strs(&train_args(ds, sur, &halted, "2")));
    let mut resume = train_args(ds, sur, &halted, "3");
    resume.push("--resume".to_string());
    ok(&strs(&resume));

    let parse = |p: &Path| -> Vec<Vec<f64>> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
            .collect()
    };
    let a = parse(&full.join("train_log.csv"));
    let b = parse(&halted.join("train_log.csv"));
    assert_eq!(a.len(), 3);
    assert_eq!(b.len(), 3);
    for (ra, rb) in a.iter().zip(&b).take(2) {
        assert_eq!(ra, rb, "pre-interruption epochs must match exactly");
    }
    let (la, lb) = (a[2][1], b[2][1]);
    assert!(
        (la - lb).abs() <= 1e-10 * la.abs().max(1.0),
        "epoch-3 loss after resume drifted: {la} vs {lb}"
    );
}

#[test]
fn train_records_ablation_switches() {
    let (_, ds, sur) = fixture();
    let tmp = TempDir::new().unwrap();
    let ckpt = tmp.path().join("ckpt");
    let mut args = train_args(ds, sur, &ckpt, "1");
    for s in ["--ablate", "no_dose"] {
        args.push(s.to_string());
    }
    ok(&strs(&args));
    let man = read_json(&ckpt.join("manifest.json"));
    assert_eq!(man["config"]["no_dose"], true);
    let echo = read_json(&ckpt.join("run_config.json"));
    assert_eq!(echo["config"]["train"]["no_dose"], true);
}

#[test]
fn verify_bound_sweep_passes_and_reports() {
    let tmp = TempDir::new().unwrap();
    let rep = tmp.path().join("rep");
    let out = ok(&[
        "verify-bound",
        "--report-dir",
        rep.to_str().unwrap(),
        "--seed",
        "3",
        "--worlds",
        "8",
        "--max-dims",
        "5,3,3,2",
    ]);
    assert_eq!(code(&out), 0);
    let csv = fs::read_to_string(rep.join("bound_sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "seed,family,risk,entropy,kl_term,slack");
    assert_eq!(lines.len(), 1 + 8 * 4, "one row per world x teacher family");
    for line in &lines[1..] {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 6);
        let slack: f64 = f[5].parse().unwrap();
        assert!(slack >= -1e-9, "bound violated in {line}");
    }
}

#[test]
fn verify_bound_inject_fault_exits_nonzero() {
    let tmp = TempDir::new().unwrap();
    let out = run(&[
        "verify-bound",
        "--report-dir",
        tmp.path().join("rep").to_str().unwrap(),
        "--inject-fault",
    ]);
    assert_eq!(code(&out), 1, "fault injection must fail verification");
    assert!(
        stderr(&out).contains("sums to"),
        "stderr should name the broken normalization: {}",
        stderr(&out)
    );
}

#[test]
fn report_marks_missing_metrics_absent() {
    let tmp = TempDir::new().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let summary = tmp.path().join("summary");
    let out = ok(&[
        "report",
        "--report-dir",
        summary.to_str().unwrap(),
        empty.to_str().unwrap(),
        tmp.path().join("never_made").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "missing run data must not crash report");
    let csv = fs::read_to_string(summary.join("summary.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 2 * 10);
    for line in &lines[1..] {
        assert!(line.ends_with(",absent"), "expected absent row, got {line}");
    }
}

#[test]
fn report_rerun_is_byte_identical() {
    let (_, ds, sur) = fixture();
    let tmp = TempDir::new().unwrap();
    let ckpt = tmp.path().join("ckpt");
    let rep = tmp.path().join("rep");
    ok(&strs(&train_args(ds, sur, &ckpt, "1")));
    ok(&[
        "eval-oneshot",
        "--dataset-dir",
        ds.to_str().unwrap(),
        "--checkpoint-dir",
        ckpt.to_str().unwrap(),
        "--report-dir",
        rep.to_str().unwrap(),
        "--runs",
        "3",
    ]);
    let s1 = tmp.path().join("s1");
    let s2 = tmp.path().join("s2");
    for s in [&s1, &s2] {
        ok(&[
            "report",
            "--report-dir",
            s.to_str().unwrap(),
            rep.to_str().unwrap(),
        ]);
    }
    for f in ["summary.csv", "oneshot_bar.png", "embedding_scatter.png"] {
        let a = fs::read(s1.join(f)).unwrap();
        let b = fs::read(s2.join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical report runs");
    }
}
