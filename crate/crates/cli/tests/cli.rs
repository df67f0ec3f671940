//! End-to-end tests of the `loramix` binary: pipeline stages chained
//! through real files, exit codes, artifact contents, and determinism.

use loramix_core::ckpt;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_loramix"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// Small, fast experiment: two classes, 96 samples, two epochs a stage.
fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("exp.ini");
    let out_dir = dir.join("out");
    let text = format!(
        "[data]\nsamples = 96\nnoise = 0.2\n\n\
         [train]\nsupernet_epochs = 2\nmole_epochs = 2\nwarmup_epochs = 1\nbatch_size = 32\n\n\
         [search]\npopulation = 6\ngenerations = 2\ntop_k = 3\n\n\
         [probe]\nsamples = 24\n\n\
         [run]\nout_dir = {}\nseed = 7\n{body}",
        out_dir.display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn cfg_arg(path: &Path) -> String {
    path.display().to_string()
}

#[test]
fn pipeline_produces_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let c = cfg_arg(&cfg);
    let out = tmp.path().join("out");

    run_ok(&["pretrain", "-c", &c]);
    assert!(out.join("supernet.tlra").exists());
    assert!(out.join("pretrain.jsonl").exists());
    assert!(out.join("manifest.ini").exists());

    run_ok(&["train-mole", "-c", &c]);
    assert!(out.join("mole.tlra").exists());
    assert!(out.join("mole.jsonl").exists());

    let search = run_ok(&["search", "-c", &c]);
    assert!(search.contains("\"best_subnet\""));
    assert!(out.join("search.jsonl").exists());
    assert!(out.join("search_result.json").exists());

    let subnet = "2:24:[1,2;2,4]";
    run_ok(&["merge", "-c", &c, "--subnet", subnet]);
    assert!(out.join("merged.tlra").exists());
    assert!(out.join("merged.mixture.csv").exists());

    let probe = run_ok(&["probe", "-c", &c]);
    assert!(probe.contains("\"mean_offdiag_similarity\""));
    for f in [
        "sim_matrix.csv",
        "sim_matrix.svg",
        "sim_matrix_frozen.csv",
        "expert_sim_by_layer.csv",
        "assignment.csv",
        "assignment.svg",
        "mixtures.csv",
    ] {
        assert!(out.join(f).exists(), "missing probe artifact {f}");
    }
}

#[test]
fn training_logs_are_valid_jsonl_with_expected_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let c = cfg_arg(&cfg);
    run_ok(&["pretrain", "-c", &c]);
    run_ok(&["train-mole", "-c", &c]);

    let mole_log = std::fs::read_to_string(tmp.path().join("out/mole.jsonl")).unwrap();
    let mut saw_warmup = false;
    let mut saw_joint = false;
    for line in mole_log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("valid json line");
        for key in ["epoch", "phase", "step", "loss", "lr_expert", "lr_router"] {
            assert!(v.get(key).is_some(), "missing {key} in {line}");
        }
        match v["phase"].as_str().unwrap() {
            "warmup" => {
                saw_warmup = true;
                assert_eq!(v["lr_router"].as_f64().unwrap(), 0.0);
            }
            "joint" => saw_joint = true,
            other => panic!("unexpected phase {other}"),
        }
    }
    assert!(saw_warmup && saw_joint);

    // Expert LR starts the warm-up ramp at exactly 1e-5.
    let first: serde_json::Value =
        serde_json::from_str(mole_log.lines().next().unwrap()).unwrap();
    assert_eq!(first["lr_expert"].as_f64().unwrap(), 1e-5);

    let trace = std::fs::read_to_string(tmp.path().join("out/search.jsonl"));
    if let Ok(trace) = trace {
        for line in trace.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            for key in ["iter", "rank", "subnet", "val_loss", "params", "flops"] {
                assert!(v.get(key).is_some(), "missing {key} in trace");
            }
        }
    }
}

#[test]
fn manifest_reflects_set_overrides_and_resolves_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let c = cfg_arg(&cfg);
    run_ok(&["pretrain", "-c", &c, "--set", "train.supernet_epochs=1", "--set", "run.seed=9"]);
    let manifest = std::fs::read_to_string(tmp.path().join("out/manifest.ini")).unwrap();
    assert!(manifest.contains("supernet_epochs = 1"));
    assert!(manifest.contains("seed = 9"));
    // Defaults are materialized, not left implicit.
    assert!(manifest.contains("rank = 8"));
    assert!(manifest.contains("router_lr = 0.1"));
    assert!(manifest.contains("preset = tiny"));
}

#[test]
fn unknown_config_key_and_section_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.ini");
    std::fs::write(&path, "[train]\nlearning_rate = 1\n").unwrap();
    let out = run(&["pretrain", "-c", &cfg_arg(&path)]);
    assert_eq!(exit_code(&out), 3);

    std::fs::write(&path, "[bogus]\nx = 1\n").unwrap();
    let out = run(&["pretrain", "-c", &cfg_arg(&path)]);
    assert_eq!(exit_code(&out), 3);

    let cfg = write_config(tmp.path(), "");
    let out = bin()
        .args(["pretrain", "-c", &cfg_arg(&cfg), "--set", "train.bogus=1"])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 3);
}

#[test]
fn missing_inputs_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["pretrain", "-c", &cfg_arg(&tmp.path().join("absent.ini"))]);
    assert_eq!(exit_code(&out), 2);

    let cfg = write_config(tmp.path(), "");
    let c = cfg_arg(&cfg);
    // train-mole before pretrain: supernet checkpoint is missing.
    let out = run(&["train-mole", "-c", &c]);
    assert_eq!(exit_code(&out), 2);

    run_ok(&["pretrain", "-c", &c]);
    let ghost = tmp.path().join("ghost.tlra");
    let out = run(&[
        "eval",
        "-c",
        &c,
        "--checkpoint",
        &ghost.display().to_string(),
        "--subnet",
        "2:16:[1,2;1,2]",
    ]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn corrupted_checkpoint_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let c = cfg_arg(&cfg);
    run_ok(&["pretrain", "-c", &c]);

    let path = tmp.path().join("out/supernet.tlra");
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xFF;
    std::fs::write(&path, bytes).unwrap();

    let out = run(&[
        "eval",
        "-c",
        &c,
        "--checkpoint",
        &path.display().to_string(),
        "--subnet",
        "2:16:[1,2;1,2]",
    ]);
    assert_eq!(exit_code(&out), 4);
    let msg = String::from_utf8_lossy(&out.stderr).to_lowercase();
    assert!(msg.contains("crc"), "stderr should name the CRC failure: {msg}");
}

#[test]
fn merged_checkpoint_is_standalone_without_expert_tensors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let c = cfg_arg(&cfg);
    run_ok(&["pretrain", "-c", &c]);
    run_ok(&["train-mole", "-c", &c]);
    run_ok(&["merge", "-c", &c, "--subnet", "2:16:[1,2;2,2]"]);

    let map = ckpt::load(&tmp.path().join("out/merged.tlra")).unwrap();
    assert!(!map.is_empty());
    for name in map.keys() {
        assert!(
            !name.starts_with("lora.") && !name.starts_with("router.") && !name.starts_with("optim."),
            "merged checkpoint must hold plain weights only, found {name}"
        );
    }
    // Sliced to the subnet: embed 16, two blocks.
    assert_eq!(map["patch.weight"].shape()[0], 16);
    assert!(map.contains_key("block1.fc2.weight"));
    assert!(!map.contains_key("block2.fc2.weight"));
}

#[test]
fn factored_and_merged_paths_agree_on_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let c = cfg_arg(&cfg);
    run_ok(&["pretrain", "-c", &c]);
    run_ok(&["train-mole", "-c", &c]);
    let subnet = "3:24:[2,4;1,2;2,4]";
    run_ok(&["merge", "-c", &c, "--subnet", subnet]);

    let out = tmp.path().join("out");
    let mole_preds = out.join("preds_mole.csv");
    let merged_preds = out.join("preds_merged.csv");
    run_ok(&[
        "eval", "-c", &c,
        "--checkpoint", &out.join("mole.tlra").display().to_string(),
        "--subnet", subnet,
        "--split", "all",
        "--predictions", &mole_preds.display().to_string(),
    ]);
    run_ok(&[
        "eval", "-c", &c,
        "--checkpoint", &out.join("merged.tlra").display().to_string(),
        "--subnet", subnet,
        "--split", "all",
        "--predictions", &merged_preds.display().to_string(),
    ]);
    let a = std::fs::read_to_string(&mole_preds).unwrap();
    let b = std::fs::read_to_string(&merged_preds).unwrap();
    assert_eq!(a, b, "factored and merged predictions diverge");
    assert!(a.lines().count() > 90); // header + 96 samples
}

#[test]
fn pipeline_is_deterministic_for_a_fixed_seed() {
    let run_once = |dir: &Path| -> (Vec<u8>, String) {
        let cfg = write_config(dir, "");
        let c = cfg_arg(&cfg);
        run_ok(&["pretrain", "-c", &c]);
        run_ok(&["train-mole", "-c", &c]);
        run_ok(&["merge", "-c", &c, "--subnet", "2:24:[2,4;2,2]"]);
        let merged = std::fs::read(dir.join("out/merged.tlra")).unwrap();
        let eval = run_ok(&[
            "eval", "-c", &c,
            "--checkpoint", &dir.join("out/mole.tlra").display().to_string(),
            "--subnet", "2:24:[2,4;2,2]",
        ]);
        // Strip the absolute checkpoint path; everything else must match.
        let v: serde_json::Value = serde_json::from_str(&eval).unwrap();
        let stripped = format!(
            "{}|{}|{}|{}",
            v["loss"], v["accuracy"], v["correct"], v["total"]
        );
        (merged, stripped)
    };
    let t1 = tempfile::tempdir().unwrap();
    let t2 = tempfile::tempdir().unwrap();
    let (m1, e1) = run_once(t1.path());
    let (m2, e2) = run_once(t2.path());
    assert_eq!(m1, m2, "merged checkpoints differ between identical runs");
    assert_eq!(e1, e2, "eval metrics differ between identical runs");
}

#[test]
fn idx_dataset_feeds_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let n = 64usize;
    let side = 16usize;

    // Hand-built IDX pair: u32 big-endian headers, u8 payload.
    let mut images = Vec::new();
    images.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    images.extend_from_slice(&(n as u32).to_be_bytes());
    images.extend_from_slice(&(side as u32).to_be_bytes());
    images.extend_from_slice(&(side as u32).to_be_bytes());
    let mut labels = Vec::new();
    labels.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for i in 0..n {
        let class = i % 2;
        labels.push(class as u8);
        for p in 0..side * side {
            let v = if class == 0 { (p % 7) * 30 } else { 255 - (p % 5) * 40 };
            images.push(v as u8);
        }
    }
    let img_path = tmp.path().join("train-images.idx");
    let lbl_path = tmp.path().join("train-labels.idx");
    std::fs::write(&img_path, images).unwrap();
    std::fs::write(&lbl_path, labels).unwrap();

    let body = format!(
        "[data]\nsource = idx\ntrain_images = {}\ntrain_labels = {}\n",
        img_path.display(),
        lbl_path.display()
    );
    let path = tmp.path().join("idx.ini");
    let out_dir = tmp.path().join("out");
    std::fs::write(
        &path,
        format!(
            "{body}\n[train]\nsupernet_epochs = 1\nbatch_size = 32\n\n[run]\nout_dir = {}\n",
            out_dir.display()
        ),
    )
    .unwrap();
    run_ok(&["pretrain", "-c", &cfg_arg(&path)]);
    assert!(out_dir.join("supernet.tlra").exists());

    // Truncated image payload is a schema violation, not an IO surprise.
    let img_bytes = std::fs::read(&img_path).unwrap();
    std::fs::write(&img_path, &img_bytes[..img_bytes.len() - 10]).unwrap();
    let out = run(&["pretrain", "-c", &cfg_arg(&path)]);
    assert_eq!(exit_code(&out), 3);
}

#[test]
fn mole_mode_none_runs_full_finetune_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[mole]\nmode = none\n");
    let c = cfg_arg(&cfg);
    run_ok(&["pretrain", "-c", &c]);
    run_ok(&["train-mole", "-c", &c]);
    let out = tmp.path().join("out");
    assert!(out.join("finetune.tlra").exists());
    assert!(out.join("finetune.jsonl").exists());
    let map = ckpt::load(&out.join("finetune.tlra")).unwrap();
    assert!(map.keys().all(|k| !k.starts_with("lora.")));
}

#[test]
fn single_lora_mode_trains_one_expert() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[mole]\nmode = single_lora\n");
    let c = cfg_arg(&cfg);
    run_ok(&["pretrain", "-c", &c]);
    run_ok(&["train-mole", "-c", &c]);
    let map = ckpt::load(&tmp.path().join("out/mole.tlra")).unwrap();
    assert!(map.contains_key("lora.l0.k0.U"));
    assert!(!map.contains_key("lora.l0.k1.U"));
}

#[test]
fn periodic_checkpoints_are_written_when_requested() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let c = cfg_arg(&cfg);
    run_ok(&[
        "pretrain", "-c", &c,
        "--set", "train.supernet_epochs=4",
        "--set", "train.checkpoint_every=2",
    ]);
    let out = tmp.path().join("out");
    assert!(out.join("supernet.ep2.tlra").exists());
    assert!(out.join("supernet.tlra").exists());
    // The final epoch writes the standard artifact, not an epoch-tagged one.
    assert!(!out.join("supernet.ep4.tlra").exists());
}

#[test]
fn eval_writes_prediction_csv_in_dataset_order() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let c = cfg_arg(&cfg);
    run_ok(&["pretrain", "-c", &c]);
    let preds = tmp.path().join("preds.csv");
    run_ok(&[
        "eval", "-c", &c,
        "--checkpoint", &tmp.path().join("out/supernet.tlra").display().to_string(),
        "--subnet", "2:16:[1,2;1,2]",
        "--predictions", &preds.display().to_string(),
    ]);
    let text = std::fs::read_to_string(&preds).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "index,label,pred");
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 3);
        assert_eq!(cols[0].parse::<usize>().unwrap(), i);
    }
}
