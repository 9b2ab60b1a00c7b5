use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CORRIDOR: &str = include_str!("../../../configs/corridor.toml");

fn cds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cds")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn small_corridor(dir: &Path) -> PathBuf {
    let text = CORRIDOR
        .replace("size = 10000", "size = 800")
        .replace("size = 3000", "size = 300");
    let path = dir.join("corridor.toml");
    fs::write(&path, text).unwrap();
    path
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_train_evaluate_analyze() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_corridor(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let data = tmp.path().join("data");
    let out = cds(&["generate-data", "--config", cfg, "--out", data.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("scenario.json").exists());
    assert_eq!(files(&data).len(), 4);

    let mut runs = Vec::new();
    for strategy in ["no-share", "share-all"] {
        let run = tmp.path().join(strategy);
        let out = cds(&[
            "train", "--config", cfg, "--data", data.to_str().unwrap(), "--strategy", strategy, "--seed", "1", "--out",
            run.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let manifest = fs::read_to_string(run.join("run_manifest.json")).unwrap();
        assert!(manifest.contains(&format!("\"strategy_tag\": \"{strategy}\"")));
        assert!(manifest.contains("\"tau_bounds\""));
        assert_eq!(code(&cds(&["evaluate", run.to_str().unwrap()])), 0);
        assert!(run.join("evaluation.json").exists());
        runs.push(run.to_str().unwrap().to_string());
    }
    let report = tmp.path().join("report");
    let mut args = vec!["analyze"];
    args.extend(runs.iter().map(String::as_str));
    args.extend(["--out", report.to_str().unwrap()]);
    let out = cds(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(report.join("scenario.csv")).unwrap();
    assert!(csv.starts_with("strategy,task,J,D_KL,runs\n"));
    assert!(csv.contains("\nno-share,") && csv.contains("\nshare-all,"));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_corridor(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let mut trees = Vec::new();
    for k in 0..2 {
        let data = tmp.path().join(format!("data{k}"));
        let run = tmp.path().join(format!("run{k}"));
        assert_eq!(code(&cds(&["generate-data", "--config", cfg, "--seed", "4", "--out", data.to_str().unwrap()])), 0);
        let out = cds(&[
            "train", "--config", cfg, "--data", data.to_str().unwrap(), "--strategy", "cds-quantile:50", "--seed", "4",
            "--out", run.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0);
        trees.push((files(&data), files(&run)));
    }
    assert_eq!(trees[0], trees[1]);
}

#[test]
fn sweep_writes_one_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_corridor(tmp.path());
    let out_dir = tmp.path().join("sweep");
    let out = cds(&[
        "sweep", "--config", cfg.to_str().unwrap(), "--seeds", "0,1", "--jobs", "2", "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("aggregate.csv")).unwrap();
    assert!(csv.starts_with("strategy,task,metric,n,mean,half_width\n"));
    // 3 strategies x (3 tasks + mean) x 2 metrics
    assert_eq!(csv.lines().count(), 1 + 3 * 4 * 2);
    assert_eq!(files(&out_dir).iter().filter(|(p, _)| p.ends_with("run_manifest.json")).count(), 6);
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out_dir = out_dir.to_str().unwrap();
    let cases = [
        (
            "missing environment",
            CORRIDOR.replace("[environment]\nkind = \"corridor-tri-task\"\nlength = 9\njump_cell = 6\n", ""),
            "environment",
        ),
        ("unknown task", CORRIDOR.replace("task = 2", "task = 5"), "datasets[2].task"),
        ("bad strategy", CORRIDOR.replace("cds-quantile:50", "cds-quantile:150"), "strategies[2]"),
        ("negative beta", format!("{CORRIDOR}\n[learner]\nbeta = -1.0\n"), "beta"),
        ("not toml", "name = ".to_string(), ""),
    ];
    for (label, text, field) in cases {
        let path = tmp.path().join("bad.toml");
        fs::write(&path, text).unwrap();
        let out = cds(&["generate-data", "--config", path.to_str().unwrap(), "--out", out_dir]);
        assert_eq!(code(&out), 2, "{label}");
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(stderr.contains(field), "{label}: {stderr}");
    }
    let missing = cds(&["generate-data", "--config", "/nonexistent/cfg.toml", "--out", out_dir]);
    assert_eq!(code(&missing), 2);
    assert!(!Path::new(out_dir).exists());
}

#[test]
fn runtime_faults_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_corridor(tmp.path());
    let out = cds(&[
        "train", "--config", cfg.to_str().unwrap(), "--data", tmp.path().join("nothing").to_str().unwrap(), "--strategy",
        "no-share", "--out", tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    let out = cds(&["evaluate", tmp.path().join("nothing").to_str().unwrap()]);
    assert_eq!(code(&out), 3);

    // a penalty this large pushes data actions past the divergence cap
    let text = format!("{}\n[learner]\nbeta = 20.0\nmu_mode = \"uniform\"\n", fs::read_to_string(&cfg).unwrap());
    let hot = tmp.path().join("hot.toml");
    fs::write(&hot, text).unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&cds(&["generate-data", "--config", hot.to_str().unwrap(), "--out", data.to_str().unwrap()])), 0);
    let out = cds(&[
        "train", "--config", hot.to_str().unwrap(), "--data", data.to_str().unwrap(), "--strategy", "no-share", "--out",
        tmp.path().join("hot-run").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("divergence"));
    assert!(!tmp.path().join("hot-run").exists());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&cds(&["train"])), 2);
    assert_eq!(code(&cds(&["frobnicate"])), 2);
    let out = cds(&["train", "--config", "x", "--data", "y", "--strategy", "share-some", "--out", "z"]);
    assert_eq!(code(&out), 2);
}
