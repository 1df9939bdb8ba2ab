use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repshot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repshot"))
        .args(args)
        .env_remove("REPSHOT_OUTPUT_DIR")
        .env_remove("REPSHOT_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = repshot(args);
    assert!(
        out.status.success(),
        "repshot {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, task: &str, extra: &[&str]) -> PathBuf {
    let data = dir.join(format!("{task}-data"));
    let mut args = vec!["synth", "--task", task, "--out-dir", s(&data), "--rois", "5", "--seed", "2"];
    args.extend_from_slice(extra);
    ok(&args);
    data.join("manifest.toml")
}

const SMALL_CLASSIFICATION: &str = r#"schema_version = 1
task = "classification"
random_repeats = 2
folds = 3
seed = 7

[dataset.synthetic]
num_subjects = 12
r = 5
class_separation = 0.5
seed = 1

[template]
max_epochs = 3

[classifier]
epochs = 10
"#;

const SMALL_REGRESSION: &str = r#"schema_version = 1
task = "regression"
random_repeats = 2
folds = 3
seed = 7

[dataset.synthetic]
num_subjects = 6
r = 4
seed = 1

[template]
max_epochs = 3

[evolution]
epochs = 4
"#;

#[test]
fn benchmark_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [("cls.toml", SMALL_CLASSIFICATION), ("reg.toml", SMALL_REGRESSION)] {
        let cfg = dir.path().join(name);
        fs::write(&cfg, text).unwrap();
        let a = dir.path().join(format!("{name}-a"));
        let b = dir.path().join(format!("{name}-b"));
        let c = dir.path().join(format!("{name}-c"));
        let stdout = ok(&["benchmark", "--config", s(&cfg), "--output-dir", s(&a)]);
        assert!(stdout.starts_with("| Method |"));
        ok(&["--threads", "2", "benchmark", "--config", s(&cfg), "--output-dir", s(&b)]);
        let persisted = a.join("run_config.toml");
        ok(&["benchmark", "--config", s(&persisted), "--output-dir", s(&c)]);

        let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert!(names.iter().any(|n| n == "report.json"));
        assert!(names.iter().any(|n| n == "report.md"));
        for n in &names {
            if n == "run_config.toml" {
                continue;
            }
            let first = fs::read(a.join(n)).unwrap();
            assert_eq!(first, fs::read(b.join(n)).unwrap(), "{n:?} differs across thread counts");
            assert_eq!(first, fs::read(c.join(n)).unwrap(), "{n:?} differs when rerun from the persisted config");
        }
    }
}

#[test]
fn template_estimation_writes_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "classification", &["--num-subjects", "8"]);
    for method in ["cbt", "avg", "random"] {
        let out = dir.path().join(format!("{method}.txt"));
        ok(&[
            "estimate-cbt",
            "--manifest",
            s(&manifest),
            "--out",
            s(&out),
            "--method",
            method,
            "--class",
            "AD",
            "--template-epochs",
            "3",
        ]);
        let meta = fs::read_to_string(dir.path().join(format!("{method}.txt.meta.json"))).unwrap();
        assert!(meta.contains("population_hash"));
        assert!(fs::read_to_string(&out).unwrap().lines().count() == 5);
    }
}

#[test]
fn evolution_train_and_predict() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "regression", &["--num-subjects", "4"]);
    let ckpt = dir.path().join("cascade.ckpt");
    ok(&[
        "train-evolution",
        "--manifest",
        s(&manifest),
        "--out",
        s(&ckpt),
        "--epochs",
        "3",
        "--template-epochs",
        "2",
    ]);
    let preds = dir.path().join("preds");
    let baseline = manifest.parent().unwrap().join("subject000_t0.txt");
    let stdout = ok(&["--output-dir", s(&preds), "predict", "--checkpoint", s(&ckpt), "--baseline", s(&baseline)]);
    assert_eq!(stdout.lines().count(), 2);
    assert!(preds.join("subject000_t0_pred_t2.txt").exists());
}

#[test]
fn classifier_train_and_classify() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "classification", &["--num-subjects", "8"]);
    let ckpt = dir.path().join("gat.ckpt");
    ok(&[
        "train-classifier",
        "--manifest",
        s(&manifest),
        "--out",
        s(&ckpt),
        "--strategy",
        "avg",
        "--epochs",
        "5",
    ]);
    let data = manifest.parent().unwrap();
    let stdout = ok(&[
        "classify",
        "--checkpoint",
        s(&ckpt),
        s(&data.join("subject000.txt")),
        s(&data.join("subject001.txt")),
    ]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("file\tlabel"));

    let wrong = repshot(&["predict", "--checkpoint", s(&ckpt), "--baseline", s(&data.join("subject000.txt"))]);
    assert_eq!(wrong.status.code(), Some(1));
}

#[test]
fn errors_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    let out = repshot(&["benchmark", "--config", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: ") && err.contains("absent.toml"));
    assert_eq!(err.trim_end().lines().count(), 1);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "schema_version = 1\ntask = \"regression\"\nstrategies = [\"best\"]\n[dataset.synthetic]\n").unwrap();
    assert_eq!(repshot(&["benchmark", "--config", s(&bad)]).status.code(), Some(1));

    assert_eq!(repshot(&["benchmark", "--synthetic"]).status.code(), Some(1));
    assert_eq!(repshot(&["no-such-command"]).status.code(), Some(2));
}
