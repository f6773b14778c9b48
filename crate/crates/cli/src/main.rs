//! `fat`: synthetic data generation, training under subject-aware
//! evaluation schemes, ablation sweeps, finite-difference gradient
//! verification, and adjacency export.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or input error,
//! 3 training divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use fat_core::data::io::{load_dataset, save_dataset, save_ground_truth};
use fat_core::data::splits::Scheme;
use fat_core::data::synth::{generate_synthetic, scrambled_path_edges, SyntheticSpec};
use fat_core::data::{default_channel_names, FeatureDataset};
use fat_core::gradcheck::component_reports_for;
use fat_core::model::{build_model, count_params, load_checkpoint, save_checkpoint, FatConfig};
use fat_core::train::{
    ablation_csv, ada_grid, adjacency_csv, bands_grid, export_adjacency_topk, metrics_jsonl,
    pratio_grid, run_ablation, run_scheme, AblationCell, TrainConfig, TrainError,
};

/// All gradient checks must come in under this relative error.
const GRAD_TOL: f64 = 1e-4;
/// Bias injected by `--sabotage` to prove the checker can fail.
const SABOTAGE_BIAS: f64 = 1e-2;

#[derive(Parser)]
#[command(
    name = "fat",
    about = "Fourier adjacency transformer for band-power features",
    version
)]
struct Cli {
    /// Worker threads for fold-parallel training (default: one per core)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known coupling structure
    GenSynth {
        /// Generator spec (JSON); defaults apply for missing fields
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train under an evaluation scheme; writes metrics, checkpoints and the
    /// resolved configuration
    Train {
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// {"model": {...}, "train": {...}} (JSON); defaults apply
        #[arg(long)]
        config: Option<PathBuf>,
        /// "loso", "ratio:<train>:<test>" or "kfold:<k>"
        #[arg(long)]
        scheme: String,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every cell of an ablation grid and write a CSV table
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "loso")]
        scheme: String,
        /// "pratio", "bands" or "ada" (adjacency on/off)
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients against finite differences for every
    /// component; exits 0 only if all are within tolerance
    Gradcheck {
        /// Optional {"model": {...}} to use for the full-model check
        /// (must include channels and n_classes; dropout is forced to 0)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Deliberately corrupt one derivative per component to verify the
        /// failure path (must exit 1)
        #[arg(long)]
        sabotage: bool,
    },
    /// Export the strongest adjacency entries from a checkpoint as CSV
    ExportAdjacency {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of edges per component
        #[arg(long, default_value_t = 15)]
        k: usize,
        /// Output CSV file
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    /// A verification failed (exit 1).
    Check(String),
    /// Bad arguments or unreadable/invalid inputs (exit 2).
    Input(String),
    /// Training produced a non-finite loss (exit 3).
    Diverged(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Input(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Check(m) | CliError::Input(m) | CliError::Diverged(m) => m,
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
        other => CliError::Input(other.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: could not configure {jobs} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenSynth { spec, out, seed } => cmd_gen_synth(spec.as_deref(), &out, seed),
        Command::Train { data, config, scheme, out } => {
            cmd_train(&data, config.as_deref(), &scheme, &out)
        }
        Command::Ablate { data, config, scheme, grid, out } => {
            cmd_ablate(&data, config.as_deref(), &scheme, &grid, &out)
        }
        Command::Gradcheck { config, sabotage } => cmd_gradcheck(config.as_deref(), sabotage),
        Command::ExportAdjacency { checkpoint, k, out } => {
            cmd_export_adjacency(&checkpoint, k, &out)
        }
    }
}

// ---- configuration loading -----------------------------------------------

/// The config file: both sections optional, all fields defaulted.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    model: Option<Value>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

fn read_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| input(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| input(format!("config {}: {e}", p.display())))
        }
    }
}

/// Builds the model configuration, filling `channels`, `bands` and
/// `n_classes` from the dataset when the file omits them.
fn resolve_model_cfg(model: Option<Value>, ds: &FeatureDataset) -> Result<FatConfig, CliError> {
    let mut v = model.unwrap_or_else(|| json!({}));
    let obj = v
        .as_object_mut()
        .ok_or_else(|| input("config: \"model\" must be a JSON object"))?;
    obj.entry("channels").or_insert(json!(ds.channels()));
    obj.entry("bands").or_insert(json!(ds.bands()));
    obj.entry("n_classes").or_insert(json!(ds.n_classes));
    let cfg: FatConfig =
        serde_json::from_value(v).map_err(|e| input(format!("config: model: {e}")))?;
    cfg.validate().map_err(input)?;
    Ok(cfg)
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    data: String,
    scheme: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<&'a str>,
    model: &'a FatConfig,
    train: &'a TrainConfig,
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| input(format!("cannot write {}: {e}", path.display())))
}

// ---- subcommands ---------------------------------------------------------

fn cmd_gen_synth(spec_path: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut spec = match spec_path {
        None => SyntheticSpec::default(),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| input(format!("cannot read spec {}: {e}", p.display())))?;
            let raw: Value = serde_json::from_str(&text)
                .map_err(|e| input(format!("spec {}: {e}", p.display())))?;
            let has_edges = raw.get("coupling_edges").is_some();
            let mut spec: SyntheticSpec =
                serde_json::from_value(raw).map_err(|e| input(format!("spec {}: {e}", p.display())))?;
            // the serde default edges assume 16 channels; re-derive them for
            // other channel counts unless the file pinned its own
            if !has_edges && spec.channels != 16 {
                spec.coupling_edges = scrambled_path_edges(spec.channels);
            }
            spec
        }
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (_, ds, truth) = generate_synthetic(&spec).map_err(input)?;
    fs::create_dir_all(out).map_err(|e| input(format!("cannot create {}: {e}", out.display())))?;
    save_dataset(&ds, out).map_err(input)?;
    save_ground_truth(&truth, out).map_err(input)?;
    println!(
        "wrote {} samples ({} channels x {} bands, {} classes, {} subjects) to {}",
        ds.n(),
        ds.channels(),
        ds.bands(),
        ds.n_classes,
        ds.subjects().len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    data: &Path,
    config: Option<&Path>,
    scheme_str: &str,
    out: &Path,
) -> Result<(), CliError> {
    let ds = load_dataset(data).map_err(input)?;
    let file_cfg = read_file_config(config)?;
    let model_cfg = resolve_model_cfg(file_cfg.model, &ds)?;
    let train_cfg = file_cfg.train.unwrap_or_default();
    let scheme = Scheme::parse(scheme_str).map_err(input)?;

    let result = run_scheme(&ds, &scheme, &model_cfg, &train_cfg).map_err(train_err)?;

    fs::create_dir_all(out).map_err(|e| input(format!("cannot create {}: {e}", out.display())))?;
    let resolved = ResolvedConfig {
        data: data.display().to_string(),
        scheme: scheme.describe(),
        grid: None,
        model: &model_cfg,
        train: &train_cfg,
    };
    write_text(
        &out.join("resolved_config.json"),
        &serde_json::to_string_pretty(&resolved).expect("config serializes"),
    )?;
    write_text(&out.join("metrics.jsonl"), &metrics_jsonl(&result.metrics))?;
    for (fold, model) in result.models.iter().enumerate() {
        let path = out.join(format!("fold_{fold:02}.ckpt"));
        save_checkpoint(model, &path).map_err(input)?;
    }
    for (fold, acc) in result.metrics.per_fold_accuracy.iter().enumerate() {
        println!("fold {fold}: accuracy {acc:.4}");
    }
    println!(
        "scheme {}: mean accuracy {:.4} (std {:.4}) over {} folds",
        result.metrics.scheme,
        result.metrics.mean_accuracy,
        result.metrics.std_accuracy,
        result.metrics.per_fold_accuracy.len()
    );
    Ok(())
}

fn cmd_ablate(
    data: &Path,
    config: Option<&Path>,
    scheme_str: &str,
    grid_name: &str,
    out: &Path,
) -> Result<(), CliError> {
    let ds = load_dataset(data).map_err(input)?;
    let file_cfg = read_file_config(config)?;
    let model_cfg = resolve_model_cfg(file_cfg.model, &ds)?;
    let train_cfg = file_cfg.train.unwrap_or_default();
    let scheme = Scheme::parse(scheme_str).map_err(input)?;
    let grid: Vec<AblationCell> = match grid_name {
        "pratio" => pratio_grid(),
        "bands" => bands_grid(),
        "ada" => ada_grid(),
        other => {
            return Err(input(format!(
                "unknown grid \"{other}\" (expected pratio, bands or ada)"
            )))
        }
    };

    let rows = run_ablation(&ds, &grid, &model_cfg, &train_cfg, &scheme).map_err(train_err)?;

    fs::create_dir_all(out).map_err(|e| input(format!("cannot create {}: {e}", out.display())))?;
    let resolved = ResolvedConfig {
        data: data.display().to_string(),
        scheme: scheme.describe(),
        grid: Some(grid_name),
        model: &model_cfg,
        train: &train_cfg,
    };
    write_text(
        &out.join("resolved_config.json"),
        &serde_json::to_string_pretty(&resolved).expect("config serializes"),
    )?;
    let csv = ablation_csv(&rows);
    write_text(&out.join("ablation.csv"), &csv)?;
    for row in &rows {
        println!(
            "{}: mean accuracy {:.4} (std {:.4})",
            row.cell, row.mean_accuracy, row.std_accuracy
        );
    }
    println!("wrote {} cells to {}", rows.len(), out.join("ablation.csv").display());
    Ok(())
}

fn cmd_gradcheck(config: Option<&Path>, sabotage: bool) -> Result<(), CliError> {
    let file_cfg = read_file_config(config)?;
    let model_cfg = match file_cfg.model {
        None => None,
        Some(v) => {
            let cfg: FatConfig =
                serde_json::from_value(v).map_err(|e| input(format!("config: model: {e}")))?;
            cfg.validate().map_err(input)?;
            let params = count_params(&build_model::<f64>(&cfg).map_err(input)?);
            if params > 20_000 {
                eprintln!(
                    "note: {params} trainable parameters; finite differences cost \
                     two forward passes per parameter, expect a long wait"
                );
            }
            Some(cfg)
        }
    };
    let bias = if sabotage { Some(SABOTAGE_BIAS) } else { None };
    let reports = component_reports_for(model_cfg.as_ref(), bias)
        .map_err(|e| CliError::Check(format!("gradient check could not run: {e}")))?;
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.max_rel_err < GRAD_TOL;
        println!(
            "{:<28} max rel err {:>10.3e}  ({} coords)  {}",
            r.name,
            r.max_rel_err,
            r.coords_checked,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        println!("gradcheck: PASS ({} components < {GRAD_TOL:.0e})", reports.len());
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "gradcheck: FAIL ({} of {} components at or above {GRAD_TOL:.0e}: {})",
            failed.len(),
            reports.len(),
            failed.join(", ")
        )))
    }
}

fn cmd_export_adjacency(checkpoint: &Path, k: usize, out: &Path) -> Result<(), CliError> {
    let model = load_checkpoint::<f32>(checkpoint).map_err(input)?;
    let (periodic, aperiodic) = export_adjacency_topk(&model, k).map_err(input)?;
    let names = default_channel_names(model.cfg.channels);
    write_text(out, &adjacency_csv(&periodic, &aperiodic, &names))?;
    println!(
        "wrote top {k} edges per component ({} rows) to {}",
        periodic.len() + aperiodic.len(),
        out.display()
    );
    Ok(())
}
