use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use acl::harness::{ExperimentConfig, RunRecord};
use acl::metrics::{acc, bwt, ResultMatrix};

fn acl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acl")).args(args).output().expect("spawn acl")
}

fn small_config(dir: &Path) -> String {
    let mut c = ExperimentConfig::synthetic(3, 2, 8, 20);
    c.name = "tiny".into();
    c.epochs = 2;
    c.seeds = vec![1, 2];
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_writes_run_directories_and_metrics_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let out = tmp.path().join("runs");
    let o = acl(&["train", "--config", &config, "--out", out.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("ACC%"));

    for seed in ["1", "2"] {
        let dir = out.join("tiny").join(seed);
        for f in ["run.json", "r_matrix.csv", "summary.txt"] {
            assert!(dir.join(f).is_file(), "missing {f}");
        }
        let rec: RunRecord = serde_json::from_reader(fs::File::open(dir.join("run.json")).unwrap()).unwrap();
        let r = ResultMatrix::read_csv(fs::File::open(dir.join("r_matrix.csv")).unwrap()).unwrap();
        assert_eq!(r, rec.r);

        let m = acl(&["metrics", "--r-matrix", dir.join("r_matrix.csv").to_str().unwrap()]);
        assert!(m.status.success());
        let text = stdout(&m);
        assert!(text.contains(&format!("acc {:?}", acc(&r).unwrap())), "{text}");
        assert!(text.contains(&format!("bwt {:?}", bwt(&r).unwrap())), "{text}");
        assert_eq!(rec.metrics.acc, acc(&r).unwrap());
    }
}

#[test]
fn seeds_flag_and_overrides_apply() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let out = tmp.path().join("runs");
    let o = acl(&[
        "train", "--config", &config, "--seeds", "7", "--set", "epochs=1", "--set", "name=\"one\"",
        "--out", out.to_str().unwrap(), "--quiet",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rec: RunRecord =
        serde_json::from_reader(fs::File::open(out.join("one/7/run.json")).unwrap()).unwrap();
    assert_eq!((rec.seed, rec.config.epochs), (7, 1));
    assert_eq!(rec.epochs.len(), 3);
}

#[test]
fn bad_override_exits_2_and_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    for (set, key) in [("lr.sharde=0.1", "lr.sharde"), ("batch_size=0", "batch_size"), ("epochs=\"many\"", "epochs")] {
        let o = acl(&["train", "--config", &config, "--set", set, "--out", tmp.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{set}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(key), "{set}: {err}");
    }
}

#[test]
fn report_merges_runs_as_mean_and_std() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let out = tmp.path().join("runs");
    let o = acl(&["train", "--config", &config, "--out", out.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success());
    let csv = tmp.path().join("table.csv");
    let o = acl(&["report", out.to_str().unwrap(), "--csv", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("ACL (tiny)")).expect(&text);

    let accs: Vec<f64> = ["1", "2"]
        .iter()
        .map(|s| {
            let r: RunRecord =
                serde_json::from_reader(fs::File::open(out.join("tiny").join(s).join("run.json")).unwrap()).unwrap();
            r.acc()
        })
        .collect();
    let mean = (accs[0] + accs[1]) / 2.0;
    let std = ((accs[0] - mean).powi(2) + (accs[1] - mean).powi(2)).sqrt();
    let cell = format!("{:.2}({:.2})", 100.0 * mean, 100.0 * std);
    assert!(line.contains(&cell), "{line} vs {cell}");
    assert!(fs::read_to_string(csv).unwrap().lines().count() == 2);
}

#[test]
fn report_rejects_mixed_task_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let out = tmp.path().join("runs");
    let a = acl(&["train", "--config", &config, "--seeds", "1", "--out", out.to_str().unwrap(), "--quiet"]);
    assert!(a.status.success());
    let b = acl(&[
        "train", "--config", &config, "--seeds", "1", "--set", "name=\"two\"", "--set", "dataset.tasks=2",
        "--set", "model.max_tasks=2", "--out", out.to_str().unwrap(), "--quiet",
    ]);
    assert!(b.status.success(), "{}", String::from_utf8_lossy(&b.stderr));
    let o = acl(&["report", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("report error"));
}
