mod common;

use std::process::Command;

use common::fixture_run;
use featbench::featfind::Method;

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bench"))
}

#[test]
fn generate_prints_one_tsv_row_per_pair() {
    let out = bench()
        .args([
            "generate",
            "--task",
            "agr_sv_num_pp",
            "--n",
            "5",
            "--seed",
            "4",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|l| l.split('\t').count() == 6));
    let again = bench()
        .args([
            "generate",
            "--task",
            "agr_sv_num_pp",
            "--n",
            "5",
            "--seed",
            "4",
        ])
        .output()
        .unwrap();
    assert_eq!(text.as_bytes(), again.stdout.as_slice());
}

#[test]
fn unknown_task_exits_with_usage_error() {
    let out = bench()
        .args(["generate", "--task", "no_such_task"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_then_heatmap_from_the_site_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture_run(dir.path(), "agr_sv_num_pp", 16, vec![Method::Mean]);
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, toml::to_string(&cfg).unwrap()).unwrap();
    let status = bench()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .args(["--jobs", "2", "--methods", "mean,random"])
        .status()
        .unwrap();
    assert!(status.success());
    let summary = std::fs::read_to_string(cfg.out_dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);

    let svg = dir.path().join("h.svg");
    let status = bench()
        .args(["heatmap", "--in"])
        .arg(cfg.out_dir.join("sites.csv"))
        .args(["--task", "agr_sv_num_pp", "--method", "random", "--out"])
        .arg(&svg)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("<rect").count(), 2 * 5);
}

#[test]
fn failed_checkpoint_gives_exit_status_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture_run(dir.path(), "agr_sv_num_pp", 16, vec![Method::Mean]);
    let bad = dir.path().join("bad.safetensors");
    std::fs::write(&bad, b"not a tensor file").unwrap();
    let good = cfg.model_dir.join("model.safetensors");
    let status = bench()
        .args(["run", "--model-dir"])
        .arg(&cfg.model_dir)
        .arg("--checkpoints")
        .arg(format!("{},{}", good.display(), bad.display()))
        .args([
            "--tasks",
            "agr_sv_num_pp",
            "--methods",
            "mean",
            "--train-pairs",
            "10",
            "--eval-pairs",
            "5",
            "--out",
        ])
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
    let failures = std::fs::read_to_string(dir.path().join("out").join("failures.csv")).unwrap();
    assert!(failures.lines().nth(1).unwrap().starts_with("bad,"));
}
