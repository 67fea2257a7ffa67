use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn storyloom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_storyloom")).args(args).output().expect("spawn storyloom")
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let o = storyloom(args);
    assert!(o.status.success(), "storyloom {args:?} failed:\n{}", stderr(&o));
    o
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(storyloom(&["--help"]).status.code(), Some(0));
    assert_eq!(storyloom(&["--version"]).status.code(), Some(0));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = storyloom(&["cost", "report", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--no-such-flag"));
    assert_eq!(storyloom(&["train", "--stage", "4"]).status.code(), Some(1));
}

#[test]
fn cost_report_csv_has_one_line_per_frame() {
    let o = ok(&["cost", "report", "--frames", "20", "--format", "csv"]);
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 21);
    let header: Vec<&str> = lines[0].split(',').collect();
    assert_eq!(header[0], "frame");
    let tokens_bounded = header.iter().position(|h| *h == "tokens_bounded").unwrap();
    let tail: Vec<&str> = lines[5..].iter().map(|l| l.split(',').nth(tokens_bounded).unwrap()).collect();
    assert!(tail.windows(2).all(|w| w[0] == w[1]), "bounded tokens grow after the history fills");
    for (k, line) in lines[1..].iter().enumerate() {
        assert_eq!(line.split(',').next().unwrap(), (k + 1).to_string());
    }
}

#[test]
fn cost_report_writes_files_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let dims = dir.path().join("dims.toml");
    fs::write(&dims, "layers = 2\nd = 64\nd_ff = 128\nl = 16\nm = 4\nl_cond = 16\n").unwrap();
    let out = dir.path().join("cost");
    ok(&["cost", "report", "--dims", dims.to_str().unwrap(), "--frames", "6", "--format", "csv", "--out", out.to_str().unwrap()]);
    assert_eq!(fs::read_to_string(out.join("cost.csv")).unwrap().lines().count(), 7);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "cost report");

    fs::write(&dims, "lambda = 1\n").unwrap();
    let o = storyloom(&["cost", "report", "--dims", dims.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn mask_dump_matches_hand_derived_grid() {
    let want = fs::read_to_string(golden("mask_i2_t1_q2_t1.txt")).unwrap();
    let o = ok(&["mask", "dump", "--layout", "input:2,text:1,query:2,text:1"]);
    assert_eq!(stdout(&o), want);

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("mask.txt");
    ok(&["mask", "dump", "--layout", "input:2,text:1,query:2,text:1", "--out", file.to_str().unwrap()]);
    assert_eq!(fs::read_to_string(&file).unwrap(), want);
    assert!(dir.path().join("mask.txt.manifest.json").exists());

    let o = ok(&["mask", "dump", "--layout", "input:3", "--bidirectional-input"]);
    assert_eq!(stdout(&o), "1 1 1\n1 1 1\n1 1 1\n");
}

#[test]
fn malformed_layout_is_rejected() {
    let o = storyloom(&["mask", "dump", "--layout", "text:2,input:2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = storyloom(&["mask", "dump", "--layout", "bogus:2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn stage_two_without_checkpoint_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = golden("tiny.toml");
    let o = storyloom(&[
        "train",
        "--stage",
        "2",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stage1"), "{}", stderr(&o));
    assert!(!dir.path().join("checkpoint.bin").exists());
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let o = storyloom(&["rollout", "--ckpt", "/nonexistent/checkpoint.bin"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("loading checkpoint"));
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = golden("tiny.toml");
    let cfg = cfg.to_str().unwrap();
    let data = root.join("data");
    let run = root.join("run");
    let (data_s, run_s) = (data.to_str().unwrap(), run.to_str().unwrap());

    ok(&["data", "gen", "--config", cfg, "--out", data_s]);
    for split in ["train", "val", "test"] {
        assert!(fs::read_dir(&data).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().starts_with(split)));
    }

    ok(&["train", "--stage", "1", "--config", cfg, "--data", data_s, "--out", run_s]);
    let ck = run.join("checkpoint.bin");
    let after1 = fs::read(&ck).unwrap();

    ok(&["train", "--stage", "2", "--data", data_s, "--out", run_s, "--stop-after", "2"]);
    ok(&["train", "--stage", "2", "--data", data_s, "--out", run_s]);
    let resumed = fs::read(&ck).unwrap();
    let fresh = root.join("fresh");
    fs::create_dir_all(&fresh).unwrap();
    fs::write(fresh.join("checkpoint.bin"), &after1).unwrap();
    ok(&["train", "--stage", "2", "--data", data_s, "--out", fresh.to_str().unwrap()]);
    assert_eq!(fs::read(fresh.join("checkpoint.bin")).unwrap(), resumed, "resume must match an uninterrupted run");

    ok(&["train", "--stage", "3", "--data", data_s, "--out", run_s]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 3);
    assert!(m["checksums"].as_object().is_some_and(|c| !c.is_empty()));

    let roll = root.join("roll");
    let o = ok(&[
        "rollout",
        "--ckpt",
        ck.to_str().unwrap(),
        "--mode",
        "self-rollout",
        "--n-frames",
        "3",
        "--data",
        data_s,
        "--out",
        roll.to_str().unwrap(),
    ]);
    assert!(!stdout(&o).trim().is_empty());
    let frames = fs::read(roll.join("frames.bin")).unwrap();
    let nl = frames.iter().position(|&b| b == b'\n').unwrap();
    let header: serde_json::Value = serde_json::from_slice(&frames[..nl]).unwrap();
    let shape: Vec<usize> = header["shape"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as usize).collect();
    assert_eq!(frames.len() - nl - 1, 8 * shape.iter().product::<usize>());
    assert!(shape[0] <= 3);
    assert!(roll.join("plan.txt").exists());

    let o = ok(&["metrics", "--ckpt", ck.to_str().unwrap(), "--data", data_s]);
    let metrics: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(metrics["val_text_loss"].as_f64().unwrap().is_finite());

    let abl = root.join("abl");
    let o = ok(&["ablate", "--config", cfg, "--seeds", "1,2", "--out", abl.to_str().unwrap()]);
    let table = stdout(&o);
    assert!(table.contains("+stage2") && table.contains("+stage3"), "{table}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(abl.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"].as_array().unwrap().len(), 2);
}
