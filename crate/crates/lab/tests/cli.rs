use std::fs;
use std::path::Path;
use std::process::Command;

use sha2::{Digest, Sha256};
use sscl_lab::commands::{cmd_ablate, cmd_gen_stream, cmd_run};
use sscl_lab::config::ExperimentConfig;
use sscl_lab::{checkpoint, stream_io, LabError};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sscl-lab"))
}

/// Small but complete: two tasks, a few epochs.
fn tiny(out: &Path) -> ExperimentConfig {
    let src = format!(
        "out = {out:?}\nseeds = [3]\n\n[stream]\nnum_tasks = 2\nlabels_per_class = 5\nunlabeled_per_class = 40\ntest_per_class = 20\ninput_dim = 6\n\n[train]\nepochs = 3\nwarmup_epochs = 1\nmemory = 10\nhidden = [16]\nproj_dim = 8\n"
    );
    ExperimentConfig::parse(&src, "tiny").unwrap()
}

fn first_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

fn hashes(root: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, hex::encode(Sha256::digest(fs::read(&p).unwrap()))));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn golden_headers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_run(&cfg, Some(1)).unwrap();
    let seed = dir.path().join("seed_3");
    let expect = [
        ("losses.csv", "epoch,task,sup,uns,cl,fsr,cud,total,high_conf_count,low_conf_count"),
        ("accuracy.csv", "t,i,acc"),
        ("metrics.csv", "metric,t,value"),
        ("diagnostics.csv", "task,epoch,strategy,bin,correct_count,incorrect_count"),
        ("pseudo_accuracy.csv", "task,epoch,strategy,scored,correct,accuracy,low_conf_scored,low_conf_correct"),
        ("buffer.csv", "class,rank,sample_id"),
    ];
    for (file, header) in expect {
        assert_eq!(first_line(&seed.join(file)), header, "{file}");
    }
    assert_eq!(first_line(&dir.path().join("summary.csv")), "seed,a_avg,a_last,a_avg_std,a_last_std");

    let labeled = tempfile::tempdir().unwrap();
    let mut g = tiny(labeled.path());
    g.stream.input_dim = 3;
    cmd_gen_stream(&g, false).unwrap();
    assert_eq!(first_line(&labeled.path().join("task_1/labeled.csv")), "id,label,f0,f1,f2");
    assert_eq!(first_line(&labeled.path().join("task_1/unlabeled_truth.csv")), "id,label");

    let abl = tempfile::tempdir().unwrap();
    let mut a = tiny(abl.path());
    a.grid.cells = vec!["full".into()];
    a.checkpoints = false;
    cmd_ablate(&a, Some(1)).unwrap();
    assert_eq!(first_line(&abl.path().join("comparison.csv")), "cell,seed,a_avg,a_last,a_avg_std,a_last_std");
}

#[test]
fn run_outputs_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.seeds = vec![1, 2];
    let results = cmd_run(&cfg, Some(2)).unwrap();
    assert_eq!(results.len(), 2);
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 + 1);
    assert!(summary.lines().last().unwrap().starts_with("mean,"));

    let seed = dir.path().join("seed_1");
    let acc = fs::read_to_string(seed.join("accuracy.csv")).unwrap();
    assert_eq!(acc.lines().count(), 1 + 3, "entries (1,1), (2,1), (2,2)");
    let ck = checkpoint::load(&seed.join("checkpoints/task_2.ckpt")).unwrap();
    assert_eq!((ck.task_id, ck.model.observed_classes()), (2, 4));
    let buffer = fs::read_to_string(seed.join("buffer.csv")).unwrap();
    assert_eq!(buffer.lines().count(), 1 + 10);
    let etf = fs::read_to_string(seed.join("etf.csv")).unwrap();
    assert_eq!(etf.lines().count(), 8);
    assert_eq!(etf.lines().next().unwrap().split(',').count(), 4);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(seed.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 1);
    let back = ExperimentConfig::parse(&fs::read_to_string(dir.path().join("config.toml")).unwrap(), "c").unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn minimal_one_task_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.stream.num_tasks = 1;
    cmd_run(&cfg, Some(1)).unwrap();
    let acc = fs::read_to_string(dir.path().join("seed_3/accuracy.csv")).unwrap();
    assert_eq!(acc.lines().count(), 2);
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn shared_stream_directory_pairs_the_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let stream_dir = dir.path().join("stream");
    let mut cfg = tiny(&stream_dir);
    cmd_gen_stream(&cfg, false).unwrap();
    cfg.out = dir.path().join("runs");
    cfg.stream_dir = Some(stream_dir.clone());
    cfg.checkpoints = false;
    cfg.grid.cells = vec!["full".into(), "wo_fsr".into()];
    let table = cmd_ablate(&cfg, Some(2)).unwrap();
    assert_eq!(table.len(), 2);
    assert!(dir.path().join("runs/cells/wo_fsr/seed_3/metrics.csv").exists());
    let cmp = fs::read_to_string(dir.path().join("runs/comparison.csv")).unwrap();
    assert_eq!(cmp.lines().count(), 1 + 2 * 2);
    let loaded = stream_io::read_stream(&stream_dir).unwrap();
    assert_eq!(loaded.tasks.len(), 2);
}

#[test]
fn ablation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let err = cmd_ablate(&cfg, Some(1)).unwrap_err();
    assert!(matches!(err, LabError::Usage(ref m) if m.contains("empty")), "{err}");

    let src = "[grid]\ncells = [\"full\", \"wo_everything\"]\n";
    let err = ExperimentConfig::parse(src, "g.toml").unwrap_err().to_string();
    assert!(err.starts_with("g.toml:2:1:") && err.contains("wo_cud"), "{err}");

    let src = "[grid.sweep]\nweight = \"fsr\"\nvalues = [0.1, 0.5, 1.0, 1.5, 2.0]\n";
    let cfg = ExperimentConfig::parse(src, "s").unwrap();
    assert_eq!(cfg.grid.cells(&cfg.train).unwrap().len(), 5);
}

#[test]
fn gen_stream_is_reproducible_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let st = bin().args(["gen-stream", "--out"]).arg(out).status().unwrap();
        assert!(st.success());
    }
    assert_eq!(hashes(&a), hashes(&b));
    assert_eq!(hashes(&a).iter().filter(|(p, _)| p.ends_with("test.csv")).count(), 5);

    let refused = bin().args(["gen-stream", "--out"]).arg(&a).output().unwrap();
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    let forced = bin().args(["gen-stream", "--force", "--variant", "imbalanced", "--out"]).arg(&a).status().unwrap();
    assert!(forced.success());
    let manifest = fs::read_to_string(a.join("manifest.toml")).unwrap();
    assert!(manifest.contains("variant = \"imbalanced\""), "{manifest}");
}

#[test]
fn invalid_config_exits_nonzero_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seeds = [0]\n\n[train]\nepochs = 0\n").unwrap();
    let out = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bad.toml:4:1:") && stderr.contains("epochs"), "{stderr}");

    let missing = bin().args(["run", "--config"]).arg(dir.path().join("nope.toml")).output().unwrap();
    assert!(!missing.status.success());
}

#[test]
fn cli_run_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    let out = dir.path().join("out");
    fs::write(&cfg, tiny(&out).to_toml()).unwrap();
    let st = bin().args(["run", "--seeds", "4,5", "--config"]).arg(&cfg).env("SSCL_LAB_THREADS", "1").status().unwrap();
    assert!(st.success());
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let seeds: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(seeds, ["4", "5", "mean"]);
    let dup = bin().args(["run", "--seeds", "4,4", "--config"]).arg(&cfg).status().unwrap();
    assert!(!dup.success());
}
