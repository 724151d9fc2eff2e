use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sfn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfn")).args(args).output().expect("run sfn")
}

fn ok(args: &[&str]) -> String {
    let out = sfn(args);
    assert!(
        out.status.success(),
        "sfn {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small dataset and model so the whole pipeline runs in seconds.
const PILOT: &[&str] = &[
    "--seed",
    "3",
    "--set",
    "synthetic.n_images=40",
    "--set",
    "training.epochs=1",
    "--set",
    "training.batch_size=16",
    "--set",
    "model.hidden=16",
    "--set",
    "model.question_dim=16",
    "--set",
    "model.embed_dim=8",
    "--set",
    "model.categorizer_hidden=16",
];

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = sfn(&["analyze", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    assert_eq!(sfn(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(sfn(&[]).status.code(), Some(2));
}

#[test]
fn sfn_without_pretrained_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = sfn(&["train", "--stage", "sfn", "--data", p(&data), "--out", p(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("input_fusion"), "{err}");

    let fake = dir.path().join("fusion");
    ok(&["generate-synthetic", "--out", p(&data), "--set", "synthetic.n_images=20"]);
    ok(&[&["pretrain-fusion", "--data", p(&data), "--out", p(&fake)][..], PILOT].concat());
    let out = sfn(&[
        "train",
        "--stage",
        "sfn",
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("m")),
        "--input-fusion",
        p(&fake),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("categorizer"), "{err}");
}

#[test]
fn analyze_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let rep = dir.path().join("rep");
    ok(&["generate-synthetic", "--out", p(&data), "--set", "synthetic.n_images=30"]);
    ok(&["analyze", "--data", p(&data), "--out", p(&rep)]);
    let files: Vec<_> = fs::read_dir(&rep).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(files.len() > 2, "{files:?}");
    assert!(rep.join("config.toml").exists() || files.iter().any(|f| f.to_string_lossy().ends_with(".toml")));
}

#[test]
fn generation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["generate-synthetic", "--out", p(d), "--seed", "7", "--set", "synthetic.n_images=12"]);
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().path()).collect();
    names.extend(fs::read_dir(a.join("images")).unwrap().map(|e| e.unwrap().path()));
    for path in names.iter().filter(|p| p.is_file()) {
        let rel = path.strip_prefix(&a).unwrap();
        assert_eq!(fs::read(path).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel:?}");
    }
}

#[test]
fn full_synthetic_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    let run = |args: &[&str]| ok(&[args, PILOT].concat());

    run(&["generate-synthetic", "--out", p(&d("data"))]);
    run(&["analyze", "--data", p(&d("data")), "--out", p(&d("report"))]);
    run(&["resample", "--data", p(&d("data")), "--out", p(&d("resampled"))]);
    let data = p(&d("resampled")).to_owned();
    run(&["pretrain-categorizer", "--data", &data, "--out", p(&d("cat"))]);
    run(&["pretrain-fusion", "--data", &data, "--out", p(&d("fusion"))]);
    for stage in ["if1c", "sfn"] {
        let model = d(stage);
        run(&[
            "train",
            "--stage",
            stage,
            "--data",
            &data,
            "--out",
            p(&model),
            "--categorizer",
            p(&d("cat")),
            "--input-fusion",
            p(&d("fusion")),
        ]);
        let eval = d(&format!("{stage}-eval"));
        let table = run(&["evaluate", "--data", &data, "--model", p(&model), "--out", p(&eval)]);
        assert!(table.contains("f1"), "{table}");
        let csv = fs::read_to_string(eval.join("metrics.csv")).unwrap();
        assert!(csv.starts_with("scope,count,precision,recall,f1"), "{csv}");
        assert!(csv.lines().nth(1).unwrap().starts_with("all,"));

        let lines = run(&["predict", "--data", &data, "--model", p(&model), "--split", "valid"]);
        assert!(!lines.is_empty());
        assert!(lines.lines().all(|l| l.split('|').count() == 2), "{lines}");
    }
}

#[test]
fn seeds_make_runs_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["generate-synthetic", "--out", p(&data), "--set", "synthetic.n_images=30"]);
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "4"].iter().enumerate() {
        let out = dir.path().join(format!("cat{i}"));
        ok(&[&["--threads", threads, "pretrain-categorizer", "--data", p(&data), "--out", p(&out)][..], PILOT].concat());
        let mut files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        outputs.push(files.iter().map(|f| fs::read(f).unwrap()).collect::<Vec<_>>());
    }
    assert_eq!(outputs[0], outputs[1]);
}
