//! Training loop, evaluation, scheme orchestration (trial ratio, k-fold,
//! leave-one-subject-out), ablation sweeps, and adjacency export. Every run
//! is a pure function of (dataset, configs, seeds): records carry no
//! timestamps and folds use independent derived random streams, so reruns
//! are byte-identical.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::augment::{
    band_scale_augment, blend_labels, mixup_lambda, mixup_with_lambda, sine_perturb, AugmentConfig,
};
use crate::data::splits::{make_splits, Scheme, SplitError};
use crate::data::FeatureDataset;
use crate::model::{build_model, fat_forward, fat_loss, FatConfig, FatModel, ModelError};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, Rng};
use crate::tape::{NormMode, Tape, TapeError, Targets};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub seed: u64,
    /// Test accuracy is recorded every this many epochs (and always at the
    /// final epoch).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_wd() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    200
}
fn default_batch() -> usize {
    32
}
fn default_eval_every() -> usize {
    10
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            weight_decay: default_wd(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            augment: AugmentConfig::default(),
            seed: 0,
            eval_every: default_eval_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate must be non-negative, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("need at least 1 epoch".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config(
                "batch size must be at least 2 (train-mode normalization needs it)".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(TrainError::Config("eval_every must be at least 1".into()));
        }
        self.augment.validate().map_err(TrainError::Config)?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged (non-finite loss) at fold {fold}, epoch {epoch}, step {step}")]
    Diverged { fold: usize, epoch: usize, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error("evaluation index set is empty")]
    EmptyEval,
    #[error("model has no adjacency matrices to export")]
    NoAdjacency,
    #[error("k = {k} exceeds the {max} off-diagonal entries of a {c}x{c} matrix")]
    TopKTooLarge { k: usize, max: usize, c: usize },
}

/// One metrics line: either a per-epoch record or the run summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub record: &'static str, // "epoch"
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub record: String, // "summary"
    pub scheme: String,
    pub folds: usize,
    pub per_fold_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub scheme: String,
    pub per_fold_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub records: Vec<EpochRecord>,
}

impl RunMetrics {
    pub fn summary(&self) -> SummaryRecord {
        SummaryRecord {
            record: "summary".into(),
            scheme: self.scheme.clone(),
            folds: self.per_fold_accuracy.len(),
            per_fold_accuracy: self.per_fold_accuracy.clone(),
            mean_accuracy: self.mean_accuracy,
            std_accuracy: self.std_accuracy,
        }
    }
}

/// Everything a scheme run produces; trained models are kept so callers can
/// checkpoint them or export adjacency.
pub struct SchemeResult {
    pub metrics: RunMetrics,
    pub models: Vec<FatModel<f32>>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    let _ = row[best];
    best
}

/// Fraction of `indices` whose argmax logit matches the label, in eval mode.
pub fn evaluate(
    model: &mut FatModel<f32>,
    ds: &FeatureDataset,
    indices: &[usize],
) -> Result<f64, TrainError> {
    if indices.is_empty() {
        return Err(TrainError::EmptyEval);
    }
    let c = ds.channels();
    let f = ds.bands();
    let mut correct = 0usize;
    let mut rng = Rng::new(0); // eval mode draws nothing
    for chunk in indices.chunks(64) {
        let mut data = Vec::with_capacity(chunk.len() * c * f);
        for &i in chunk {
            data.extend_from_slice(ds.sample(i));
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![chunk.len(), c, f], data));
        let logits = fat_forward(model, &mut tape, x, NormMode::Eval, &mut rng)?;
        let out = tape.value(logits);
        let k = out.last_dim();
        for (r, &i) in chunk.iter().enumerate() {
            if argmax_row(&out.data()[r * k..(r + 1) * k]) == ds.labels[i] as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Augmented minibatch: copies samples, applies band scaling and the sine
/// perturbation, then Mixup (one lambda per batch) when enabled.
fn assemble_batch(
    ds: &FeatureDataset,
    idx: &[usize],
    augment: &AugmentConfig,
    rng: &mut Rng,
) -> (Tensor<f32>, Targets<f32>) {
    let c = ds.channels();
    let f = ds.bands();
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(idx.len());
    for &i in idx {
        let mut x = ds.sample(i).to_vec();
        band_scale_augment(&mut x, c, f, rng, augment);
        sine_perturb(&mut x, c, f, rng, augment);
        rows.push(x);
    }
    let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i] as usize).collect();
    if augment.mixup {
        let lam = mixup_lambda(rng, augment.mixup_alpha) as f32;
        let mut partner: Vec<usize> = (0..idx.len()).collect();
        rng.shuffle(&mut partner);
        let mut data = Vec::with_capacity(idx.len() * c * f);
        let mut soft = Vec::with_capacity(idx.len() * ds.n_classes);
        for (r, &p) in partner.iter().enumerate() {
            data.extend(mixup_with_lambda(&rows[r], &rows[p], lam));
            soft.extend(blend_labels(labels[r], labels[p], ds.n_classes, lam));
        }
        (
            Tensor::new(vec![idx.len(), c, f], data),
            Targets::Soft(Tensor::new(vec![idx.len(), ds.n_classes], soft)),
        )
    } else {
        let data: Vec<f32> = rows.into_iter().flatten().collect();
        (Tensor::new(vec![idx.len(), c, f], data), Targets::Hard(labels))
    }
}

/// Train one fresh model on one fold. The model is initialized from a seed
/// derived from (model seed, fold) and trained with a stream derived from
/// (train seed, fold), so folds are independent and order-insensitive.
pub fn train_fold(
    ds: &FeatureDataset,
    train_idx: &[usize],
    test_idx: &[usize],
    model_cfg: &FatConfig,
    cfg: &TrainConfig,
    fold: usize,
) -> Result<(FatModel<f32>, Vec<EpochRecord>, f64), TrainError> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(TrainError::Config(format!("fold {fold} has an empty training set")));
    }
    let mut fold_model_cfg = model_cfg.clone();
    fold_model_cfg.seed = derive_seed(model_cfg.seed, fold as u64);
    let mut model = build_model::<f32>(&fold_model_cfg)?;
    let mut rng = Rng::derive(cfg.seed, fold as u64);
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        &model.params,
    );
    let mut records = Vec::new();
    let mut order: Vec<usize> = train_idx.to_vec();
    let mut last_accuracy = f64::NAN;
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue; // train-mode normalization needs at least 2 samples
            }
            let (x, targets) = assemble_batch(ds, chunk, &cfg.augment, &mut rng);
            let mut tape = Tape::new();
            let xn = tape.constant(x);
            let diverged = |_| TrainError::Diverged { fold, epoch, step };
            let (loss, _) = fat_loss(&mut model, &mut tape, xn, targets, NormMode::Train, &mut rng)
                .map_err(|e| match e {
                    ModelError::Forward(crate::layers::ForwardError::Numeric(t)) => match t {
                        TapeError::NonFinite { .. } => TrainError::Diverged { fold, epoch, step },
                        other => TrainError::Model(ModelError::from(other)),
                    },
                    other => TrainError::Model(other),
                })?;
            let loss_val = tape.value(loss).item() as f64;
            if !loss_val.is_finite() {
                return Err(TrainError::Diverged { fold, epoch, step });
            }
            tape.backward(loss).map_err(diverged)?;
            opt.step(&mut model.params, &tape);
            loss_sum += loss_val;
            batches += 1;
        }
        let train_loss = if batches > 0 { loss_sum / batches as f64 } else { f64::NAN };
        let test_accuracy = if !test_idx.is_empty()
            && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs)
        {
            let acc = evaluate(&mut model, ds, test_idx)?;
            last_accuracy = acc;
            Some(acc)
        } else {
            None
        };
        records.push(EpochRecord { record: "epoch", fold, epoch, train_loss, test_accuracy });
    }
    Ok((model, records, last_accuracy))
}

/// Build the split plan for `scheme`, train a fresh model per fold (folds
/// run in parallel), and aggregate final-epoch test accuracies.
pub fn run_scheme(
    ds: &FeatureDataset,
    scheme: &Scheme,
    model_cfg: &FatConfig,
    cfg: &TrainConfig,
) -> Result<SchemeResult, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    ds.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    if model_cfg.channels != ds.channels() || model_cfg.bands != ds.bands() {
        return Err(TrainError::Config(format!(
            "model expects {} channels x {} bands but dataset has {} x {}",
            model_cfg.channels,
            model_cfg.bands,
            ds.channels(),
            ds.bands()
        )));
    }
    let plan = make_splits(&ds.subject_id, scheme)?;
    let fold_results: Vec<Result<(FatModel<f32>, Vec<EpochRecord>, f64), TrainError>> = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(fold, split)| train_fold(ds, &split.train, &split.test, model_cfg, cfg, fold))
        .collect();
    let mut models = Vec::with_capacity(plan.folds.len());
    let mut records = Vec::new();
    let mut accs = Vec::with_capacity(plan.folds.len());
    for r in fold_results {
        let (model, recs, acc) = r?;
        models.push(model);
        records.extend(recs);
        accs.push(acc);
    }
    let (mean, std) = mean_std(&accs);
    Ok(SchemeResult {
        metrics: RunMetrics {
            scheme: scheme.describe(),
            per_fold_accuracy: accs,
            mean_accuracy: mean,
            std_accuracy: std,
            records,
        },
        models,
    })
}

// ---- ablation ------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum AblationCell {
    PRatio(f64),
    Adjacency(bool),
    Bands(Vec<String>),
}

impl AblationCell {
    pub fn label(&self) -> String {
        match self {
            AblationCell::PRatio(p) => format!("p_ratio={p}"),
            AblationCell::Adjacency(a) => format!("adjacency={a}"),
            AblationCell::Bands(b) => format!("bands={}", b.join("+")),
        }
    }
}

/// The four quantized periodic-head ratios.
pub fn pratio_grid() -> Vec<AblationCell> {
    vec![
        AblationCell::PRatio(0.0),
        AblationCell::PRatio(0.125),
        AblationCell::PRatio(0.25),
        AblationCell::PRatio(0.375),
    ]
}

/// Adjacency term on/off.
pub fn ada_grid() -> Vec<AblationCell> {
    vec![AblationCell::Adjacency(true), AblationCell::Adjacency(false)]
}

/// Single-band rows, the cumulative rows, and the full feature set.
pub fn bands_grid() -> Vec<AblationCell> {
    let b = |names: &[&str]| AblationCell::Bands(names.iter().map(|s| s.to_string()).collect());
    vec![
        b(&["delta"]),
        b(&["theta"]),
        b(&["alpha"]),
        b(&["beta"]),
        b(&["gamma"]),
        b(&["beta", "gamma"]),
        b(&["beta", "gamma", "delta"]),
        b(&["delta", "theta", "alpha", "beta", "gamma"]),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: String,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub per_fold_accuracy: Vec<f64>,
}

/// Run one scheme per grid cell, adapting the model configuration (and the
/// dataset's band axis for band cells).
pub fn run_ablation(
    ds: &FeatureDataset,
    grid: &[AblationCell],
    model_cfg: &FatConfig,
    cfg: &TrainConfig,
    scheme: &Scheme,
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::with_capacity(grid.len());
    for cell in grid {
        let mut cell_model = model_cfg.clone();
        let cell_ds;
        let data: &FeatureDataset = match cell {
            AblationCell::PRatio(p) => {
                cell_model.p_ratio = *p;
                ds
            }
            AblationCell::Adjacency(a) => {
                cell_model.use_adjacency = *a;
                ds
            }
            AblationCell::Bands(names) => {
                let keep: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
                cell_ds = ds
                    .select_bands(&keep)
                    .map_err(|e| TrainError::Config(e.to_string()))?;
                cell_model.bands = keep.len();
                &cell_ds
            }
        };
        let result = run_scheme(data, scheme, &cell_model, cfg)?;
        rows.push(AblationRow {
            cell: cell.label(),
            mean_accuracy: result.metrics.mean_accuracy,
            std_accuracy: result.metrics.std_accuracy,
            per_fold_accuracy: result.metrics.per_fold_accuracy,
        });
    }
    Ok(rows)
}

/// CSV for an ablation table; `per_fold` accuracies joined with `;` so the
/// file stays one row per cell.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("cell,mean_accuracy,std_accuracy,per_fold_accuracy\n");
    for r in rows {
        let folds: Vec<String> = r.per_fold_accuracy.iter().map(|a| format!("{a}")).collect();
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.cell,
            r.mean_accuracy,
            r.std_accuracy,
            folds.join(";")
        ));
    }
    out
}

// ---- adjacency export ----------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyEdge {
    pub i: usize,
    pub j: usize,
    pub weight: f32,
}

fn topk_offdiag(matrix: &Tensor<f32>, c: usize, k: usize) -> Vec<AdjacencyEdge> {
    let mut entries: Vec<AdjacencyEdge> = Vec::with_capacity(c * c - c);
    for i in 0..c {
        for j in 0..c {
            if i != j {
                entries.push(AdjacencyEdge { i, j, weight: matrix.data()[i * c + j] });
            }
        }
    }
    entries.sort_by(|a, b| {
        b.weight
            .abs()
            .partial_cmp(&a.weight.abs())
            .unwrap()
            .then(a.i.cmp(&b.i))
            .then(a.j.cmp(&b.j))
    });
    entries.truncate(k);
    entries
}

/// The k largest off-diagonal entries (by absolute value, ties broken by
/// index order) of each adjacency matrix: (periodic, aperiodic).
pub fn export_adjacency_topk(
    model: &FatModel<f32>,
    k: usize,
) -> Result<(Vec<AdjacencyEdge>, Vec<AdjacencyEdge>), TrainError> {
    let adj = model.adjacency.as_ref().ok_or(TrainError::NoAdjacency)?;
    let c = adj.c;
    let max = c * c - c;
    if k > max {
        return Err(TrainError::TopKTooLarge { k, max, c });
    }
    let a_p = model.params.get(adj.a_p);
    let a_a = model.params.get(adj.a_a);
    Ok((topk_offdiag(a_p, c, k), topk_offdiag(a_a, c, k)))
}

/// CSV rows for the exported edges of both components.
pub fn adjacency_csv(
    periodic: &[AdjacencyEdge],
    aperiodic: &[AdjacencyEdge],
    channel_names: &[String],
) -> String {
    let mut out = String::from("component,i,j,channel_i,channel_j,weight\n");
    for (component, edges) in [("periodic", periodic), ("aperiodic", aperiodic)] {
        for e in edges {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                component, e.i, e.j, channel_names[e.i], channel_names[e.j], e.weight
            ));
        }
    }
    out
}

/// JSON-lines serialization of a run: one line per epoch record, then the
/// summary line. Deterministic byte-for-byte given identical metrics.
pub fn metrics_jsonl(metrics: &RunMetrics) -> String {
    let mut out = String::new();
    for r in &metrics.records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out.push_str(&serde_json::to_string(&metrics.summary()).expect("summary serializes"));
    out.push('\n');
    out
}
