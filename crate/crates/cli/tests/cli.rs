//! End-to-end runs of the `milqt` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn milqt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_milqt"))
        .args(args)
        .env_remove("MILQT_THREADS")
        .output()
        .expect("failed to launch milqt")
}

fn ok(args: &[&str]) -> Output {
    let out = milqt(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["gen-synth", "--out", s(dir), "--samples", "40"];
    args.extend_from_slice(extra);
    ok(&args);
    dir.join("data.tsv")
}

fn train_small(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        s(data),
        "--out",
        s(out),
        "--epochs",
        "2",
        "--batch-size",
        "8",
    ];
    args.extend_from_slice(extra);
    milqt(&args)
}

fn worked_fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/worked.tsv")
}

#[test]
fn gen_synth_is_loadable_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(&dir.path().join("a"), &["--seed", "3"]);
    let b = gen(&dir.path().join("b"), &["--seed", "3"]);
    for ext in ["tsv", "features", "vocab", "answers", "qtypes"] {
        assert_eq!(
            fs::read(a.with_extension(ext)).unwrap(),
            fs::read(b.with_extension(ext)).unwrap(),
            "{ext}"
        );
    }
    let bundle = milqt::data::load_dataset(&a).unwrap();
    assert_eq!(bundle.len(), 40);
    assert!(bundle.samples.iter().all(|s| bundle.visual(s).is_ok()));

    let out = milqt(&[
        "gen-synth",
        "--out",
        s(&dir.path().join("c")),
        "--qtypes",
        "4",
        "--answers",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compute_prior_writes_the_worked_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("prior.csv");
    ok(&["compute-prior", s(&worked_fixture()), "--out", s(&out)]);
    let first = fs::read(&out).unwrap();
    let prior = milqt::prior::import_prior(&out).unwrap();
    assert_eq!(prior.matrix().values(), &[1.0, 0.5, 0.0, 0.0, 0.5, 1.0]);

    ok(&["compute-prior", s(&worked_fixture()), "--out", s(&out)]);
    assert_eq!(fs::read(&out).unwrap(), first);

    let empty = dir.path().join("empty.tsv");
    fs::write(&empty, "").unwrap();
    let r = milqt(&[
        "compute-prior",
        s(&empty),
        "--out",
        s(&dir.path().join("x.csv")),
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn train_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(&dir.path().join("data"), &[]);
    let run = dir.path().join("run");
    let r = train_small(&data, &run, &["--log-interval", "1"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(run.join("checkpoint/manifest.json").is_file());
    assert!(run.join("w_mil.csv").is_file());
    let log = fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch=")).count(), 2);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("run_manifest.json")).unwrap()).unwrap();
    assert!(manifest["finished_unix"].is_u64());
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 5);
    assert!(manifest["inputs"][0]["sha256"].as_str().unwrap().len() == 64);
    let w = fs::read_to_string(run.join("w_mil.csv")).unwrap();
    assert_eq!(w.lines().next().unwrap(), "qtype,topdown,bilinear_lowrank");
    assert_eq!(w.lines().count(), 4);
}

#[test]
fn train_rejects_negative_loss_weight() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(&dir.path().join("data"), &[]);
    let r = train_small(&data, &dir.path().join("run"), &["--alpha", "1,-1,1"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!dir.path().join("run/checkpoint").exists());
}

#[test]
fn averaging_run_has_no_mixing_weights() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(&dir.path().join("data"), &[]);
    let run = dir.path().join("run");
    let r = train_small(&data, &run, &["--interaction", "averaging"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(!run.join("w_mil.csv").exists());
    let manifest = fs::read_to_string(run.join("run_manifest.json")).unwrap();
    assert!(manifest.contains("averaging baseline"));
}

#[test]
fn eval_reports_and_rejects_foreign_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(&dir.path().join("data"), &[]);
    let run = dir.path().join("run");
    assert!(train_small(&data, &run, &[]).status.success());
    let ckpt = run.join("checkpoint");

    let rep = dir.path().join("rep");
    let out = ok(&["eval", s(&ckpt), s(&data), "--out", s(&rep)]);
    let line = String::from_utf8(out.stdout).unwrap();
    assert!(line.starts_with("accuracy="), "{line}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(rep.join("report.json")).unwrap()).unwrap();
    for key in [
        "samples",
        "overall_accuracy",
        "arithmetic_mpt",
        "harmonic_mpt",
        "qtype_classification_accuracy",
        "per_type",
        "qtype_per_type",
    ] {
        assert!(!report[key].is_null(), "{key}");
    }
    assert_eq!(report["samples"], 40);
    assert!(rep.join("report.csv").is_file());

    ok(&["eval", s(&ckpt), s(&data), "--no-inference-weighting"]);
    let table = String::from_utf8(ok(&["eval", s(&ckpt), s(&data), "--by-type"]).stdout).unwrap();
    for name in ["yes_no", "number", "other"] {
        assert!(table.contains(name), "{table}");
    }

    let other = gen(&dir.path().join("other"), &["--answers", "7"]);
    assert_eq!(milqt(&["eval", s(&ckpt), s(&other)]).status.code(), Some(2));
}

#[test]
fn predict_is_deterministic_and_reports_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(&dir.path().join("data"), &[]);
    let run = dir.path().join("run");
    assert!(train_small(&data, &run, &[]).status.success());
    let ckpt = run.join("checkpoint");
    let (p1, p2) = (dir.path().join("p1.tsv"), dir.path().join("p2.tsv"));
    ok(&["predict", s(&ckpt), s(&data), "--out", s(&p1)]);
    ok(&[
        "predict",
        s(&ckpt),
        s(&data),
        "--out",
        s(&p2),
        "--threads",
        "3",
    ]);
    let text = fs::read_to_string(&p1).unwrap();
    assert_eq!(text, fs::read_to_string(&p2).unwrap());

    let answers = fs::read_to_string(data.with_extension("answers")).unwrap();
    let qtypes = fs::read_to_string(data.with_extension("qtypes")).unwrap();
    assert_eq!(text.lines().count(), 40);
    for line in text.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f.len(), 4, "{line}");
        assert!(answers.lines().any(|a| a == f[1]));
        assert!(qtypes.lines().any(|q| q == f[2]));
        let top: Vec<(&str, f64)> = f[3]
            .split(';')
            .map(|kv| {
                let (k, v) = kv.split_once('=').unwrap();
                (k, v.parse().unwrap())
            })
            .collect();
        assert_eq!(top.len(), 5);
        assert_eq!(top[0].0, f[1]);
        assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
        let rebuilt: Vec<String> = top
            .iter()
            .map(|(k, v)| format!("{k}={}", milqt::diffcore::text::fmt_real(*v)))
            .collect();
        assert_eq!(rebuilt.join(";"), f[3]);
    }

    // Point one record at a feature block that does not exist.
    let records = fs::read_to_string(&data).unwrap();
    let broken: String = records
        .lines()
        .enumerate()
        .map(|(i, l)| {
            let l = if i == 1 {
                l.replace("data.features#1", "data.features#999")
            } else {
                l.to_string()
            };
            l + "\n"
        })
        .collect();
    let bad = data.with_file_name("bad.tsv");
    fs::write(&bad, broken).unwrap();
    for ext in ["vocab", "answers", "qtypes"] {
        fs::copy(data.with_extension(ext), bad.with_extension(ext)).unwrap();
    }
    let p3 = dir.path().join("p3.tsv");
    let out = ok(&["predict", s(&ckpt), s(&bad), "--out", s(&p3)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning: 1 question"));
    let lines: Vec<String> = fs::read_to_string(&p3)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert!(lines[1].starts_with("q00001\t!error\t"), "{}", lines[1]);
    let good: Vec<&str> = text.lines().collect();
    for (i, l) in lines.iter().enumerate().filter(|(i, _)| *i != 1) {
        assert_eq!(l, good[i]);
    }
}

fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in walkdir::WalkDir::new(root).sort_by_file_name() {
        let e = e.unwrap();
        if !e.file_type().is_file() {
            continue;
        }
        let rel = e.path().strip_prefix(root).unwrap().display().to_string();
        let mut bytes = fs::read(e.path()).unwrap();
        if rel.ends_with("run_manifest.json") {
            let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
            let obj = v.as_object_mut().unwrap();
            obj.remove("started_unix");
            obj.remove("finished_unix");
            bytes = serde_json::to_vec(&v).unwrap();
        }
        out.push((rel, bytes));
    }
    out
}

#[test]
fn whole_pipeline_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("work");
    let pipeline = || {
        let data = gen(&root.join("data"), &["--seed", "9"]);
        ok(&[
            "compute-prior",
            s(&data),
            "--out",
            s(&root.join("prior.csv")),
        ]);
        assert!(train_small(&data, &root.join("run"), &["--seed", "4"])
            .status
            .success());
        let ckpt = root.join("run/checkpoint");
        ok(&["eval", s(&ckpt), s(&data), "--out", s(&root.join("eval"))]);
        ok(&[
            "predict",
            s(&ckpt),
            s(&data),
            "--out",
            s(&root.join("pred.tsv")),
        ]);
        snapshot(&root)
    };
    let first = pipeline();
    let second = pipeline();
    assert!(first.len() > 15);
    assert_eq!(first, second);
}
