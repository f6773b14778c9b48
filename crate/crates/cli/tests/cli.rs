//! End-to-end tests of the `fat` binary: every subcommand, the exit-code
//! contract (0 ok, 1 failed check, 2 bad input, 3 divergence), and rerun
//! determinism of the written artifacts.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fat() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fat"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Tiny generator spec: 2 subjects x 8 trials, 4 channels, 2 classes.
const SPEC: &str = r#"{
  "n_subjects": 2,
  "trials_per_subject": 8,
  "channels": 4,
  "n_classes": 2,
  "class_signatures": [[2], [3]],
  "impostors_per_trial": 1,
  "seed": 5
}"#;

/// Small model and short schedule so tests stay fast.
const CONFIG: &str = r#"{
  "model": {"embed_dim": 8, "heads": 2, "depth": 1, "p_ratio": 0.5, "dropout": 0.0},
  "train": {"epochs": 2, "batch_size": 8, "eval_every": 1, "seed": 1}
}"#;

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

fn gen_dataset(dir: &Path) {
    let spec = dir.join("spec.json");
    write(&spec, SPEC);
    let data = dir.join("data");
    let out = run(fat().args([
        "gen-synth",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]));
    assert_eq!(code(&out), 0, "gen-synth failed: {}", stderr(&out));
}

#[test]
fn gen_synth_writes_dataset_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    write(&spec, SPEC);
    for name in ["a", "b"] {
        let out = run(fat().args([
            "gen-synth",
            "--spec",
            spec.to_str().unwrap(),
            "--out",
            tmp.path().join(name).to_str().unwrap(),
        ]));
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert!(stdout(&out).contains("wrote 16 samples"));
    }
    for file in ["manifest.json", "data.bin", "labels.bin", "subjects.bin", "sessions.bin", "ground_truth.json"] {
        let a = fs::read(tmp.path().join("a").join(file)).unwrap();
        let b = fs::read(tmp.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs across identical runs");
    }
}

#[test]
fn gen_synth_seed_flag_overrides_spec() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    write(&spec, SPEC);
    let base = tmp.path().join("base");
    let reseeded = tmp.path().join("reseeded");
    run(fat().args(["gen-synth", "--spec", spec.to_str().unwrap(), "--out", base.to_str().unwrap()]));
    let out = run(fat().args([
        "gen-synth",
        "--spec",
        spec.to_str().unwrap(),
        "--seed",
        "99",
        "--out",
        reseeded.to_str().unwrap(),
    ]));
    assert_eq!(code(&out), 0);
    let a = fs::read(base.join("data.bin")).unwrap();
    let b = fs::read(reseeded.join("data.bin")).unwrap();
    assert_ne!(a, b, "--seed had no effect");
}

#[test]
fn train_writes_outputs_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    gen_dataset(tmp.path());
    let cfg = tmp.path().join("config.json");
    write(&cfg, CONFIG);
    let data = tmp.path().join("data");
    let mut metrics = Vec::new();
    for name in ["run1", "run2"] {
        let out_dir = tmp.path().join(name);
        let out = run(fat().args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--scheme",
            "ratio:3:1",
            "--out",
            out_dir.to_str().unwrap(),
        ]));
        assert_eq!(code(&out), 0, "train failed: {}", stderr(&out));
        assert!(stdout(&out).contains("mean accuracy"));
        let text = fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
        let last = text.lines().last().unwrap();
        assert!(last.contains("\"record\":\"summary\""));
        assert!(out_dir.join("fold_00.ckpt").is_file());
        let resolved: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out_dir.join("resolved_config.json")).unwrap())
                .unwrap();
        assert_eq!(resolved["scheme"], "ratio:3:1");
        assert_eq!(resolved["model"]["channels"], 4); // injected from data
        assert_eq!(resolved["model"]["embed_dim"], 8);
        assert_eq!(resolved["train"]["epochs"], 2);
        metrics.push(text);
    }
    assert_eq!(metrics[0], metrics[1], "metrics not byte-identical across reruns");
}

#[test]
fn train_rejects_bad_scheme_and_missing_data() {
    let tmp = tempfile::tempdir().unwrap();
    gen_dataset(tmp.path());
    let data = tmp.path().join("data");
    let out_dir = tmp.path().join("out");
    let out = run(fat().args([
        "train",
        "--data",
        data.to_str().unwrap(),
        "--scheme",
        "bogus",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    assert_eq!(code(&out), 2, "bad scheme should exit 2: {}", stderr(&out));

    let out = run(fat().args([
        "train",
        "--data",
        tmp.path().join("nope").to_str().unwrap(),
        "--scheme",
        "loso",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    assert_eq!(code(&out), 2, "missing data should exit 2");

    // clap-level usage error
    let out = run(fat().args(["train", "--scheme", "loso"]));
    assert_eq!(code(&out), 2, "missing required args should exit 2");
}

#[test]
fn train_rejects_unknown_config_section() {
    let tmp = tempfile::tempdir().unwrap();
    gen_dataset(tmp.path());
    let cfg = tmp.path().join("config.json");
    write(&cfg, r#"{"modle": {}}"#);
    let out = run(fat().args([
        "train",
        "--data",
        tmp.path().join("data").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--scheme",
        "loso",
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]));
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("unknown field"));
}

#[test]
fn train_reports_divergence_with_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    gen_dataset(tmp.path());
    let cfg = tmp.path().join("config.json");
    write(
        &cfg,
        r#"{
          "model": {"embed_dim": 8, "heads": 2, "depth": 1, "p_ratio": 0.5, "dropout": 0.0},
          "train": {"epochs": 3, "batch_size": 8, "lr": 1e18, "weight_decay": 1e6, "seed": 1}
        }"#,
    );
    let out = run(fat().args([
        "train",
        "--data",
        tmp.path().join("data").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--scheme",
        "ratio:3:1",
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]));
    assert_eq!(code(&out), 3, "divergence should exit 3: {}", stderr(&out));
    assert!(stderr(&out).contains("diverged"));
}

#[test]
fn gradcheck_passes_and_sabotage_fails() {
    let out = run(fat().arg("gradcheck"));
    assert_eq!(code(&out), 0, "gradcheck failed: {}{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    for component in [
        "fourier_projector",
        "fourier_projector_nonlinear",
        "embedding",
        "attention",
        "full_model_loss",
    ] {
        assert!(text.contains(component), "missing component line: {component}\n{text}");
    }
    assert!(text.contains("gradcheck: PASS"));

    let out = run(fat().args(["gradcheck", "--sabotage"]));
    assert_eq!(code(&out), 1, "sabotaged gradcheck must exit 1");
    assert!(stderr(&out).contains("gradcheck: FAIL"));
}

#[test]
fn export_adjacency_from_trained_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    gen_dataset(tmp.path());
    let cfg = tmp.path().join("config.json");
    write(&cfg, CONFIG);
    let out_dir = tmp.path().join("out");
    let out = run(fat().args([
        "--jobs",
        "1",
        "train",
        "--data",
        tmp.path().join("data").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--scheme",
        "ratio:3:1",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = out_dir.join("fold_00.ckpt");
    let csv_path = tmp.path().join("edges.csv");
    let out = run(fat().args([
        "export-adjacency",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--k",
        "3",
        "--out",
        csv_path.to_str().unwrap(),
    ]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "component,i,j,channel_i,channel_j,weight");
    assert_eq!(lines.len(), 1 + 2 * 3, "one header plus k rows per component");
    assert_eq!(lines[1].split(',').count(), 6);
    assert!(lines[1].starts_with("periodic,"));
    assert!(lines[4].starts_with("aperiodic,"));

    // k beyond the off-diagonal count is an input error
    let out = run(fat().args([
        "export-adjacency",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--k",
        "13",
        "--out",
        csv_path.to_str().unwrap(),
    ]));
    assert_eq!(code(&out), 2);

    // corrupted checkpoint is an input error
    let bad = tmp.path().join("bad.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] ^= 0xFF;
    fs::write(&bad, &bytes).unwrap();
    let out = run(fat().args([
        "export-adjacency",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--out",
        csv_path.to_str().unwrap(),
    ]));
    assert_eq!(code(&out), 2);
}

#[test]
fn ablate_ada_grid_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    gen_dataset(tmp.path());
    let cfg = tmp.path().join("config.json");
    write(
        &cfg,
        r#"{
          "model": {"embed_dim": 8, "heads": 2, "depth": 1, "p_ratio": 0.5, "dropout": 0.0},
          "train": {"epochs": 1, "batch_size": 8, "eval_every": 1, "seed": 1}
        }"#,
    );
    let out_dir = tmp.path().join("out");
    let out = run(fat().args([
        "ablate",
        "--data",
        tmp.path().join("data").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--scheme",
        "ratio:3:1",
        "--grid",
        "ada",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    assert_eq!(code(&out), 0, "ablate failed: {}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "cell,mean_accuracy,std_accuracy,per_fold_accuracy");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("adjacency=true,"));
    assert!(lines[2].starts_with("adjacency=false,"));
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("resolved_config.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["grid"], "ada");

    let out = run(fat().args([
        "ablate",
        "--data",
        tmp.path().join("data").to_str().unwrap(),
        "--scheme",
        "ratio:3:1",
        "--grid",
        "nope",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    assert_eq!(code(&out), 2, "unknown grid should exit 2");
}
