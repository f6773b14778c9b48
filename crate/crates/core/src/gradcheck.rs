//! Central-difference gradient verification.
//!
//! Analytic gradients from the tape are compared against
//! `(f(x + h) - f(x - h)) / 2h` computed with fresh forward passes in f64.
//! The step is scaled per coordinate, `h = h0 * max(1, |x|)`, and the error
//! is relative: `|a - n| / max(1, |a|, |n|)`.

use crate::attention::{faa_forward, AdjacencyPair, FaaParams, HeadPartition, QkvKind};
use crate::layers::{Activation, Embedding, Fal, Fan, ForwardError};
use crate::model::{build_model, fat_loss, FatConfig, ModelError};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tape::{NodeId, NormMode, Tape, TapeError, Targets};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of checking one scalar-valued function.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    /// Worst relative error over every coordinate of every checked input.
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.max_rel_err < tol,
            "{}: gradient check failed: rel err {:.3e} >= {:.3e} at input {} coord {} (analytic {:.6e}, numeric {:.6e})",
            self.name,
            self.max_rel_err,
            tol,
            self.worst_input,
            self.worst_coord,
            self.analytic_at_worst,
            self.numeric_at_worst
        );
    }
}

/// Compare tape gradients of `f` against central differences at `inputs`.
///
/// `f` must be a pure function of the leaves it is handed (it may capture
/// constants). Every coordinate of every input is perturbed, so keep the
/// inputs small. `sabotage` adds a bias to one analytic gradient coordinate
/// before comparison; it exists so the failure path of downstream tooling can
/// be exercised deliberately.
pub fn check_gradients<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    h0: f64,
    sabotage: Option<f64>,
    f: F,
) -> Result<GradCheckReport, TapeError>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId, TapeError>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    assert_eq!(tape.value(loss).numel(), 1, "gradient check target must be scalar");
    tape.backward(loss)?;
    let mut analytic: Vec<Tensor<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(&leaf, t)| {
            tape.grad(leaf)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();
    if let Some(bias) = sabotage {
        analytic[0].data_mut()[0] += bias;
    }

    let eval = |xs: &[Tensor<f64>]| -> Result<f64, TapeError> {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &leaves)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ci in 0..input.numel() {
            let x = input.data()[ci];
            let h = h0 * x.abs().max(1.0);
            work[ti].data_mut()[ci] = x + h;
            let f_plus = eval(&work)?;
            work[ti].data_mut()[ci] = x - h;
            let f_minus = eval(&work)?;
            work[ti].data_mut()[ci] = x;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[ti].data()[ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_input = ti;
                report.worst_coord = ci;
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

// ---- component suite -----------------------------------------------------
//
// The checks below drive the real layer and model forward code (leaves are
// bound to the declared parameters) and are shared by the command-line
// `gradcheck` subcommand and the release gate.

fn rand_t(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::new(shape, data)
}

/// FD-check a layer through its own forward: leaf 0 is the data input, the
/// remaining leaves are bound to the trainable parameters in declaration
/// order. `overrides` replaces the starting value of trainable slot `k`
/// (useful to move zero-initialized parameters onto a non-trivial point).
fn layer_report<F>(
    name: &str,
    ps: &ParamSet<f64>,
    x: Tensor<f64>,
    overrides: &[(usize, Tensor<f64>)],
    sabotage: Option<f64>,
    forward: F,
) -> Result<GradCheckReport, TapeError>
where
    F: Fn(&mut Tape<f64>, &mut ParamSet<f64>, NodeId) -> Result<NodeId, ForwardError>,
{
    let trainable = ps.trainable_ids();
    let mut inputs = vec![x];
    for &id in &trainable {
        inputs.push(ps.get(id).clone());
    }
    for (slot, t) in overrides {
        inputs[slot + 1] = t.clone();
    }
    check_gradients(name, &inputs, DEFAULT_STEP, sabotage, |t, l| {
        for (k, &id) in trainable.iter().enumerate() {
            t.bind_param(id, l[k + 1]);
        }
        let mut ps_run = ps.clone();
        let y = forward(t, &mut ps_run, l[0]).map_err(|e| match e {
            ForwardError::Numeric(n) => n,
            ForwardError::Shape(m) => panic!("unexpected shape error in gradient check: {m}"),
        })?;
        let sq = t.mul(y, y);
        Ok(t.sum_all(sq))
    })
}

fn full_model_report(
    model_cfg: Option<&FatConfig>,
    sabotage: Option<f64>,
) -> Result<GradCheckReport, TapeError> {
    let mut cfg = model_cfg.cloned().unwrap_or_else(|| FatConfig::toy(4, 3));
    // dropout would make the forward pass stochastic, which breaks finite
    // differences
    cfg.dropout = 0.0;
    let model = build_model::<f64>(&cfg).expect("validated config");
    let trainable = model.params.trainable_ids();
    let c = cfg.channels;
    let mut rng_x = Rng::new(40);
    let mut inputs = vec![rand_t(&mut rng_x, vec![2, c, cfg.bands], -1.0, 1.0)];
    for &id in &trainable {
        inputs.push(model.params.get(id).clone());
    }
    // move the shared adjacency off its zero initialization so that path
    // carries signal
    if let Some(adj) = &model.adjacency {
        let slot = trainable.iter().position(|&id| id == adj.a_p).unwrap();
        inputs[slot + 1] = rand_t(&mut rng_x, vec![c, c], -0.5, 0.5);
    }
    let labels = vec![0, cfg.n_classes - 1];
    check_gradients("full_model_loss", &inputs, DEFAULT_STEP, sabotage, |t, l| {
        for (k, &id) in trainable.iter().enumerate() {
            t.bind_param(id, l[k + 1]);
        }
        let mut model_run = build_model::<f64>(&cfg).expect("validated config");
        let mut rng_f = Rng::new(41);
        let (loss, _) = fat_loss(
            &mut model_run,
            t,
            l[0],
            Targets::Hard(labels.clone()),
            NormMode::Train,
            &mut rng_f,
        )
        .map_err(|e| match e {
            ModelError::Forward(ForwardError::Numeric(n)) => n,
            other => panic!("unexpected error in gradient check: {other}"),
        })?;
        Ok(loss)
    })
}

/// Finite-difference reports for every differentiable component at toy
/// shapes: the two projector variants, the feature embedding, attention
/// with the adjacency term, and the full model with its loss. A `sabotage`
/// bias corrupts one analytic coordinate per component so callers can
/// verify their failure path.
pub fn component_reports(sabotage: Option<f64>) -> Result<Vec<GradCheckReport>, TapeError> {
    component_reports_for(None, sabotage)
}

/// Like [`component_reports`] but the full-model check uses the supplied
/// (already validated) configuration instead of the built-in toy one. Cost
/// grows with the square of the parameter count, so keep it small.
pub fn component_reports_for(
    model_cfg: Option<&FatConfig>,
    sabotage: Option<f64>,
) -> Result<Vec<GradCheckReport>, TapeError> {
    let mut reports = Vec::new();

    let mut rng = Rng::new(30);
    let mut ps = ParamSet::<f64>::new();
    let fal = Fal::init(&mut ps, "fal", 3, 6, 2, &mut rng);
    let x = rand_t(&mut rng, vec![2, 3], -1.0, 1.0);
    reports.push(layer_report("fourier_projector", &ps, x, &[], sabotage, |t, ps, x| {
        Ok(fal.forward(t, ps, x))
    })?);

    let mut rng = Rng::new(31);
    let mut ps = ParamSet::<f64>::new();
    let fan = Fan::init(&mut ps, "fan", 3, 6, 2, Activation::Gelu, &mut rng);
    let x = rand_t(&mut rng, vec![2, 3], -1.0, 1.0);
    reports.push(layer_report(
        "fourier_projector_nonlinear",
        &ps,
        x,
        &[],
        sabotage,
        |t, ps, x| Ok(fan.forward(t, ps, x)),
    )?);

    let mut rng = Rng::new(32);
    let mut ps = ParamSet::<f64>::new();
    let emb = Embedding::init(&mut ps, "embed", 3, 4, &mut rng);
    let x = rand_t(&mut rng, vec![3, 2, 3], -1.0, 1.0);
    reports.push(layer_report("embedding", &ps, x, &[], sabotage, move |t, ps, x| {
        emb.forward(t, ps, x, NormMode::Train)
    })?);

    let mut rng = Rng::new(33);
    let part = HeadPartition::new(8, 2, 0.5).expect("valid partition");
    let mut ps = ParamSet::<f64>::new();
    let adj = AdjacencyPair::init(&mut ps, "adj", 3);
    let faa = FaaParams::init(&mut ps, "faa", &part, QkvKind::Fal, &mut rng);
    let x = rand_t(&mut rng, vec![2, 3, 8], -1.0, 1.0);
    // adjacency is declared first; seed both matrices away from zero
    let seeds = vec![
        (0, rand_t(&mut rng, vec![3, 3], -1.0, 1.0)),
        (1, rand_t(&mut rng, vec![3, 3], -1.0, 1.0)),
    ];
    reports.push(layer_report("attention", &ps, x, &seeds, sabotage, move |t, ps, x| {
        let mut rng_f = Rng::new(34);
        faa_forward(t, ps, x, &faa, Some(&adj), &part, 0.0, NormMode::Eval, &mut rng_f)
    })?);

    reports.push(full_model_report(model_cfg, sabotage)?);
    Ok(reports)
}
