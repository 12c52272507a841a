//! End-to-end tests of the `streamdet` binary: every subcommand through a
//! real process, checking artifacts, determinism, and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_streamdet")
}

fn tmpdir(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("streamdet_bin_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed with {:?}\nstdout: {}\nstderr: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

/// A decoder small enough that training a few sequences takes well under a
/// second, with train settings to match.
fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(
        &path,
        r#"{
  "decoder": {
    "d": 16, "heads": 2, "layers": 1, "n_random": 10, "n_prop": 3,
    "mem_frames": 2, "mem_records": 4, "save_interval": 1, "classes": 3,
    "token_dim": 16, "pe_freqs": 2, "ffn_mult": 2,
    "mln_hidden": true, "motion_norm": true,
    "bounds": {"min": {"x": -32.0, "y": -32.0, "z": -2.0},
               "max": {"x": 32.0, "y": 32.0, "z": 4.0}}
  },
  "train": {"sequences": 3, "frames_per_seq": 3, "detach_prefix": 1}
}"#,
    )
    .unwrap();
    path
}

#[test]
fn full_workflow_produces_all_artifacts() {
    let dir = tmpdir("workflow");
    let out = dir.to_str().unwrap();
    let scene = dir.join("scene.jsonl");
    let scene_s = scene.to_str().unwrap();
    let cfg = small_config(&dir);
    let cfg_s = cfg.to_str().unwrap();

    // Simulate: the scene file has one line per frame and a summary prints.
    let stdout = run_ok(&[
        "simulate", "--seed", "5", "--frames", "14", "--objects", "5",
        "--scene-out", scene_s, "--out", out,
    ]);
    assert!(stdout.contains("14 frames"), "summary missing frames: {stdout}");
    let text = std::fs::read_to_string(&scene).unwrap();
    assert_eq!(text.lines().count(), 14);
    assert!(dir.join("config.snapshot.json").exists());

    // Same flags, same bytes.
    let scene2 = dir.join("scene_again.jsonl");
    run_ok(&[
        "simulate", "--seed", "5", "--frames", "14", "--objects", "5",
        "--scene-out", scene2.to_str().unwrap(), "--out", out,
    ]);
    assert_eq!(text, std::fs::read_to_string(&scene2).unwrap());

    // Train: checkpoint and loss curve appear.
    let tdir = dir.join("train");
    let tdir_s = tdir.to_str().unwrap();
    run_ok(&[
        "train", "--config", cfg_s, "--scene-in", scene_s, "--seed", "3", "--out", tdir_s,
    ]);
    let ckpt = tdir.join("checkpoint.sdeg");
    assert!(ckpt.exists());
    let loss = std::fs::read_to_string(tdir.join("loss.csv")).unwrap();
    let lines: Vec<&str> = loss.lines().collect();
    assert_eq!(lines[0], "step,loss");
    assert_eq!(lines.len(), 1 + 3, "one row per training sequence");
    assert!(lines[1].starts_with("0,"));

    // Same seed retrains to the identical checkpoint.
    let tdir2 = dir.join("train_again");
    run_ok(&[
        "train", "--config", cfg_s, "--scene-in", scene_s, "--seed", "3",
        "--out", tdir2.to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(&ckpt).unwrap(),
        std::fs::read(tdir2.join("checkpoint.sdeg")).unwrap(),
        "training must be deterministic in its seed"
    );

    // Eval with the checkpoint: CSV with the fixed schema plus a JSON twin.
    let edir = dir.join("eval");
    let edir_p = edir.to_str().unwrap();
    let stdout = run_ok(&[
        "eval", "--config", cfg_s, "--scene-in", scene_s,
        "--checkpoint", ckpt.to_str().unwrap(), "--split-speed", "1.0", "--out", edir_p,
    ]);
    assert!(stdout.contains("moving"), "summary must show the split lines: {stdout}");
    let metrics = std::fs::read_to_string(edir.join("metrics.csv")).unwrap();
    let mlines: Vec<&str> = metrics.lines().collect();
    assert_eq!(mlines[0], "split,threshold,ap,mate,mave");
    assert_eq!(mlines.len(), 1 + 3 * 4, "three splits, four thresholds");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(edir.join("metrics.json")).unwrap()).unwrap();
    let map = json["all"]["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));

    // Eval without a checkpoint is the untrained sanity floor.
    let udir = dir.join("eval_untrained");
    run_ok(&["eval", "--config", cfg_s, "--scene-in", scene_s, "--out", udir.to_str().unwrap()]);
    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(udir.join("metrics.json")).unwrap(),
    )
    .unwrap();
    let untrained = json["all"]["map"].as_f64().unwrap();
    assert!(untrained < 0.5, "an untrained model must not look competent: {untrained}");

    // Track: CSV with the identity schema.
    let kdir = dir.join("track");
    run_ok(&[
        "track", "--config", cfg_s, "--scene-in", scene_s,
        "--checkpoint", ckpt.to_str().unwrap(), "--out", kdir.to_str().unwrap(),
    ]);
    let tracks = std::fs::read_to_string(kdir.join("tracks.csv")).unwrap();
    assert_eq!(tracks.lines().next().unwrap(), "frame,time,scene,track,class,score,x,y,z,vx,vy");
}

#[test]
fn multi_seed_training_uses_per_seed_directories() {
    let dir = tmpdir("seeds");
    let out = dir.to_str().unwrap();
    let scene = dir.join("scene.jsonl");
    let scene_s = scene.to_str().unwrap();
    let cfg = small_config(&dir);

    run_ok(&["simulate", "--seed", "2", "--frames", "10", "--scene-out", scene_s, "--out", out]);
    run_ok(&[
        "train", "--config", cfg.to_str().unwrap(), "--scene-in", scene_s,
        "--seeds", "1,2", "--jobs", "2", "--out", out,
    ]);
    for seed in [1, 2] {
        let sub = dir.join(format!("seed_{seed}"));
        assert!(sub.join("checkpoint.sdeg").exists(), "missing artifacts for seed {seed}");
        assert!(sub.join("loss.csv").exists());
    }
    // Different seeds must not produce identical checkpoints.
    assert_ne!(
        std::fs::read(dir.join("seed_1/checkpoint.sdeg")).unwrap(),
        std::fs::read(dir.join("seed_2/checkpoint.sdeg")).unwrap()
    );
}

#[test]
fn env_var_supplies_the_default_outdir() {
    let dir = tmpdir("envout");
    let out = Command::new(bin())
        .args(["simulate", "--frames", "3", "--objects", "2"])
        .env("STREAMDET_OUT", &dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("config.snapshot.json").exists());
    assert!(dir.join("scene.jsonl").exists());
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let dir = tmpdir("codes");
    let out = dir.to_str().unwrap();

    // Usage and config problems: 2.
    assert_eq!(code(&[]), 2);
    assert_eq!(code(&["warp"]), 2);
    assert_eq!(code(&["simulate", "--set", "scene.bogus=1", "--out", out]), 2);
    assert_eq!(code(&["simulate", "--set", "scene.dt=0", "--out", out]), 2);
    assert_eq!(code(&["train", "--out", out]), 2);

    // Missing and malformed input files: 3.
    assert_eq!(code(&["eval", "--scene-in", "/nonexistent/void.jsonl", "--out", out]), 3);
    let broken = dir.join("broken.jsonl");
    std::fs::write(&broken, "{\"not\": \"a frame\"}\n").unwrap();
    assert_eq!(code(&["eval", "--scene-in", broken.to_str().unwrap(), "--out", out]), 3);

    // Divergence: 4. An absurd learning rate with clipping off blows the
    // loss past the guard within a sequence or two.
    let scene = dir.join("scene.jsonl");
    run_ok(&["simulate", "--seed", "2", "--frames", "10", "--scene-out", scene.to_str().unwrap(), "--out", out]);
    let cfg = small_config(&dir);
    assert_eq!(
        code(&[
            "train", "--config", cfg.to_str().unwrap(), "--scene-in", scene.to_str().unwrap(),
            "--set", "train.lr=1e12", "--set", "train.clip=0", "--set", "train.sequences=6",
            "--out", out,
        ]),
        4
    );

    // Help is success.
    assert_eq!(code(&["--help"]), 0);
    let help = run(&["--help"]);
    assert!(String::from_utf8_lossy(&help.stdout).contains("selfcheck"));
}

#[test]
fn bench_emits_every_paradigm() {
    let dir = tmpdir("bench");
    let out = dir.to_str().unwrap();
    run_ok(&[
        "bench", "--out", out,
        "--set", "bench.n_tok=48",
        "--set", "bench.warmup=0",
        "--set", "bench.iters=2",
        "--set", "bench.mem_frames=[1,2]",
        "--set", "bench.perspective_k=[1,2]",
        "--set", "bench.bev_k=[1]",
        "--set", "bench.bev_cells=8",
        "--set", "bench.bev_channels=2",
        "--set", "bench.positions=[2,6]",
        "--set", "bench.position_window=2",
    ]);
    let csv = std::fs::read_to_string(dir.join("bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,history,latency_us_median,latency_us_p90,state_bytes");
    for method in ["object_centric", "perspective", "bev_concat", "object_centric_position"] {
        assert!(
            lines[1..].iter().any(|l| l.starts_with(method)),
            "bench.csv missing {method}:\n{csv}"
        );
    }
    // Latencies are positive numbers.
    for l in &lines[1..] {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols.len(), 5);
        assert!(cols[2].parse::<f64>().unwrap() > 0.0);
    }
}
