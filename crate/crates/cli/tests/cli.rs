use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dts_cli::report::mean_std;
use dts_cli::{RunManifest, RunStatus};

const TINY: &str = r#"
preset = "desk"
name = "tiny"

[dataset]
labeled_size = 16
unlabeled_size = 100

[dataset.synthetic]
dim = 8
per_class = 60

[train]
iterations = 1
epochs_per_iteration = 2
pretrain_epochs = 3
batch_size = 8
mu = 2
steps_per_epoch = 2
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Env {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Env { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("tiny.toml")
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn dts(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_dts"))
            .args(args)
            .env_remove(dts_cli::OUT_DIR_ENV)
            .output()
            .unwrap()
    }

    fn run(&self, extra: &[&str]) -> Output {
        let config = self.config();
        let out = self.out();
        let mut args = vec!["run", "--config", config.to_str().unwrap(), "--out-dir", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        self.dts(&args)
    }

    fn only_manifest(&self) -> RunManifest {
        let dirs: Vec<_> = fs::read_dir(self.out()).unwrap().map(|e| e.unwrap().path()).collect();
        assert_eq!(dirs.len(), 1, "{dirs:?}");
        RunManifest::read(&dirs[0]).unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn supervised_only_with_three_seeds_gives_three_summary_rows() {
    let env = Env::new();
    let o = env.run(&["--ablation", "supervised_only", "--seeds", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = env.only_manifest();
    assert_eq!(m.seeds, vec![0, 1, 2]);
    assert_eq!(m.runs.len(), 3);
    for run in &m.runs {
        assert_eq!(run.status, RunStatus::Completed);
        let dir = m.out_dir.join(&run.dir);
        for f in ["summary.json", "metrics.jsonl", "effective_config.toml", "split_manifest.json", "score_histogram.csv"] {
            assert!(dir.join(f).exists(), "{f} missing in {}", dir.display());
        }
        assert!(dir.join("checkpoints/iter0/inlier_student.json").exists());
        assert!(dir.join("checkpoints/final/outlier_teacher.json").exists());
    }
    assert_eq!(csv_rows(&m.out_dir.join("runs.csv")).len(), 3);
    let agg = csv_rows(&m.out_dir.join("aggregate.csv"));
    assert_eq!(agg.len(), 1);
    assert_eq!(&agg[0][1], "3");
}

#[test]
fn override_is_persisted_in_the_effective_config() {
    let env = Env::new();
    let o = env.run(&["--set", "tau=0.9", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = env.only_manifest();
    let text = fs::read_to_string(m.out_dir.join(&m.runs[0].dir).join("effective_config.toml")).unwrap();
    let value: toml::Table = toml::from_str(&text).unwrap();
    assert_eq!(value["train"]["tau"].as_float(), Some(0.9));
    assert_eq!(value["train"]["seed"].as_integer(), Some(4));
}

#[test]
fn missing_dataset_path_fails_validation_before_training() {
    let env = Env::new();
    let o = env.run(&["--dataset", "/nonexistent/data.csv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dataset.path"), "{}", stderr(&o));
    assert!(!env.out().exists());
}

#[test]
fn schema_errors_name_the_field() {
    let env = Env::new();
    fs::write(env.config(), format!("{TINY}\nmomentumm = 0.5\n")).unwrap();
    let o = env.dts(&["validate-config", "--config", env.config().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.momentumm") || stderr(&o).contains("momentumm"), "{}", stderr(&o));

    let o = env.dts(&["validate-config", "--set", "batch_size=-3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.batch_size"), "{}", stderr(&o));

    let o = env.dts(&["validate-config", "--preset", "desk"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("lr = 0.03"));
}

#[test]
fn effective_config_reproduces_the_run_bit_exactly() {
    let env = Env::new();
    assert_eq!(code(&env.run(&["--seed", "7", "--set", "lambda_cr=0.2"])), 0);
    let m = env.only_manifest();
    let first = m.out_dir.join(&m.runs[0].dir);

    let replay = env.dir.path().join("replay");
    let o = env.dts(&[
        "run",
        "--config",
        first.join("effective_config.toml").to_str().unwrap(),
        "--out-dir",
        replay.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let second = replay.join(m.out_dir.file_name().unwrap()).join(&m.runs[0].dir);
    for f in ["metrics.jsonl", "summary.json", "pretrain.jsonl", "split_manifest.json", "checkpoints/final/inlier_student.json"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn aggregate_matches_recomputation_from_metrics_streams() {
    let env = Env::new();
    assert_eq!(code(&env.run(&["--seeds", "0,5,9"])), 0);
    let m = env.only_manifest();
    let mut acc = Vec::new();
    let mut auroc = Vec::new();
    for run in &m.runs {
        let text = fs::read_to_string(m.out_dir.join(&run.dir).join("metrics.jsonl")).unwrap();
        let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        assert_eq!(last["kind"], "final");
        acc.push(last["accuracy"].as_f64().unwrap());
        auroc.push(last["auroc"].as_f64().unwrap());
    }
    let agg = csv_rows(&m.out_dir.join("aggregate.csv"));
    let (am, asd) = mean_std(&acc);
    let (um, usd) = mean_std(&auroc);
    let parsed: Vec<f64> = (2..6).map(|i| agg[0][i].parse().unwrap()).collect();
    assert_eq!(parsed, vec![am, asd, um, usd]);
}

#[test]
fn single_seed_reports_zero_std_and_report_is_idempotent() {
    let env = Env::new();
    assert_eq!(code(&env.run(&[])), 0);
    let m = env.only_manifest();
    let names = ["runs.csv", "aggregate.csv", "auroc_vs_epoch.csv"];
    let before: Vec<Vec<u8>> = names.iter().map(|n| fs::read(m.out_dir.join(n)).unwrap()).collect();
    let agg = csv_rows(&m.out_dir.join("aggregate.csv"));
    assert_eq!((&agg[0][3], &agg[0][5]), ("0", "0"));
    assert_eq!(csv_rows(&m.out_dir.join("auroc_vs_epoch.csv")).len(), 2);

    for _ in 0..2 {
        let o = env.dts(&["report", m.out_dir.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let after: Vec<Vec<u8>> = names.iter().map(|n| fs::read(m.out_dir.join(n)).unwrap()).collect();
        assert_eq!(before, after);
    }
}

#[test]
fn sweep_produces_one_run_per_value_per_seed() {
    let env = Env::new();
    let config = env.config();
    let out = env.out();
    let o = env.dts(&[
        "sweep", "--config", config.to_str().unwrap(), "--out-dir", out.to_str().unwrap(),
        "--seeds", "2", "--axis", "mismatch_ratio", "--values", "0.3,0.6", "--jobs", "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = env.only_manifest();
    assert_eq!(m.axis.as_deref(), Some("mismatch_ratio"));
    let keys: Vec<(Option<&str>, u64)> = m.runs.iter().map(|r| (r.axis_value.as_deref(), r.seed)).collect();
    assert_eq!(keys, vec![(Some("0.3"), 0), (Some("0.3"), 1), (Some("0.6"), 0), (Some("0.6"), 1)]);
    let agg = csv_rows(&m.out_dir.join("aggregate.csv"));
    assert_eq!(agg.iter().map(|r| r[0].to_string()).collect::<Vec<_>>(), vec!["0.3", "0.6"]);
    let table = csv::Reader::from_path(m.out_dir.join("table.csv")).unwrap().headers().unwrap().clone();
    assert_eq!(table.iter().collect::<Vec<_>>(), vec!["metric", "mismatch_ratio=0.3", "mismatch_ratio=0.6"]);
    let text = fs::read_to_string(m.out_dir.join(&m.runs[2].dir).join("effective_config.toml")).unwrap();
    assert!(text.contains("mismatch_ratio = 0.6"));
}

#[test]
fn sweep_rejects_empty_and_non_numeric_values() {
    let env = Env::new();
    let config = env.config();
    let out = env.out();
    let base = ["sweep", "--config", config.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "--axis"];

    let o = env.dts(&[&base[..], &["lambda_seen", "--values", ""]].concat());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));

    let o = env.dts(&[&base[..], &["tau", "--values", "0.8,high"]].concat());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("\"high\"") && stderr(&o).contains("train.tau"), "{}", stderr(&o));

    let o = env.dts(&[&base[..], &["no_such_field", "--values", "1"]].concat());
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn failed_runs_are_marked_and_excluded_from_reports() {
    let env = Env::new();
    let o = env.run(&["--set", "lr=1e300"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let m = env.only_manifest();
    assert!(matches!(m.runs[0].status, RunStatus::Failed { .. }));
    let o = env.dts(&["report", m.out_dir.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--include-incomplete"));
}

#[test]
fn output_root_defaults_to_the_environment_variable() {
    let env = Env::new();
    let root = env.dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_dts"))
        .args(["run", "--config", env.config().to_str().unwrap(), "--ablation", "supervised_only"])
        .env(dts_cli::OUT_DIR_ENV, &root)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(RunManifest::read(&fs::read_dir(&root).unwrap().next().unwrap().unwrap().path()).is_ok());
}
