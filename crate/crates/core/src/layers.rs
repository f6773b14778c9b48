//! Building-block layers: plain linear, the Fourier analysis layer (cos/sin
//! periodic branch next to an affine branch), its activation-on-aperiodic
//! baseline variant, the two-stage batch-normalized embedding MLP, learnable
//! positional embedding, and inverted dropout.

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::scalar::{s, Scalar};
use crate::tape::{NodeId, NormMode, Tape, TapeError};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Recoverable forward-pass failure.
#[derive(Debug, thiserror::Error)]
pub enum ForwardError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Numeric(#[from] TapeError),
}

/// Pointwise nonlinearity selector for the aperiodic branch of the baseline
/// projector and anywhere else a configurable activation is needed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
    Sigmoid,
}

impl Activation {
    pub fn apply<S: Scalar>(self, tape: &mut Tape<S>, x: NodeId) -> NodeId {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }

    /// Scalar version used by double-precision oracles in tests.
    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Gelu => crate::tape::gelu_scalar(x),
            Activation::Sigmoid => crate::tape::sigmoid_scalar(x),
        }
    }
}

/// Xavier-uniform init for a `(d_in, d_out)` matrix in the row-vector
/// convention (`y = x . W`). Draws happen in row-major order so parameter
/// initialization is a deterministic function of the stream position.
pub fn xavier_uniform<S: Scalar>(rng: &mut Rng, d_in: usize, d_out: usize) -> Tensor<S> {
    let limit = (6.0 / (d_in + d_out) as f64).sqrt();
    let data = (0..d_in * d_out).map(|_| s::<S>(rng.uniform(-limit, limit))).collect();
    Tensor::new(vec![d_in, d_out], data)
}

// ---- linear --------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn init<S: Scalar>(
        ps: &mut ParamSet<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), xavier_uniform(rng, d_in, d_out), true);
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(vec![d_out]), true));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, ps: &ParamSet<S>, x: NodeId) -> NodeId {
        assert_eq!(tape.value(x).last_dim(), self.d_in, "linear input width");
        let w = tape.param(ps, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(ps, b);
                tape.add_broadcast(y, b)
            }
            None => y,
        }
    }
}

// ---- Fourier analysis layer ---------------------------------------------

/// Projector whose output is `[cos(x.W_p) || sin(x.W_p) || x.W_n + B_n]`.
/// `n_per` is the total periodic width (cos half plus sin half), so `W_p`
/// has `n_per/2` columns; the periodic branch carries no bias and no
/// activation, the aperiodic branch is strictly affine.
#[derive(Clone, Debug)]
pub struct Fal {
    pub w_p: Option<ParamId>,
    pub w_n: Option<ParamId>,
    pub b_n: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
    pub n_per: usize,
}

impl Fal {
    pub fn init<S: Scalar>(
        ps: &mut ParamSet<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        n_per: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(n_per % 2 == 0, "periodic width must be even, got {n_per}");
        assert!(n_per <= d_out, "periodic width {n_per} exceeds output width {d_out}");
        let w_p = (n_per > 0)
            .then(|| ps.add(format!("{name}.w_p"), xavier_uniform(rng, d_in, n_per / 2), true));
        let n_ap = d_out - n_per;
        let (w_n, b_n) = if n_ap > 0 {
            (
                Some(ps.add(format!("{name}.w_n"), xavier_uniform(rng, d_in, n_ap), true)),
                Some(ps.add(format!("{name}.b_n"), Tensor::zeros(vec![n_ap]), true)),
            )
        } else {
            (None, None)
        };
        Fal { w_p, w_n, b_n, d_in, d_out, n_per }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, ps: &ParamSet<S>, x: NodeId) -> NodeId {
        self.forward_with_activation(tape, ps, x, Activation::Identity)
    }

    /// Shared body for the plain layer (identity) and the baseline variant
    /// (nonlinearity on the aperiodic branch only).
    pub fn forward_with_activation<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &ParamSet<S>,
        x: NodeId,
        act: Activation,
    ) -> NodeId {
        assert_eq!(tape.value(x).last_dim(), self.d_in, "projector input width");
        let rank = tape.value(x).shape().len();
        let axis = rank - 1;
        let mut parts = Vec::with_capacity(3);
        if let Some(w_p) = self.w_p {
            let w_p = tape.param(ps, w_p);
            let phase = tape.matmul(x, w_p);
            parts.push(tape.cos(phase));
            parts.push(tape.sin(phase));
        }
        if let Some(w_n) = self.w_n {
            let w_n = tape.param(ps, w_n);
            let affine = tape.matmul(x, w_n);
            let b_n = tape.param(ps, self.b_n.expect("affine branch bias"));
            let affine = tape.add_broadcast(affine, b_n);
            parts.push(act.apply(tape, affine));
        }
        tape.concat(&parts, axis)
    }
}

/// Baseline projector: same shapes as [`Fal`] but the aperiodic branch goes
/// through a pointwise nonlinearity.
#[derive(Clone, Debug)]
pub struct Fan {
    pub fal: Fal,
    pub activation: Activation,
}

impl Fan {
    pub fn init<S: Scalar>(
        ps: &mut ParamSet<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        n_per: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        Fan { fal: Fal::init(ps, name, d_in, d_out, n_per, rng), activation }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, ps: &ParamSet<S>, x: NodeId) -> NodeId {
        self.fal.forward_with_activation(tape, ps, x, self.activation)
    }
}

// ---- normalization wrappers ---------------------------------------------

/// Batch normalization over the flattened leading axes with running
/// statistics stored as non-trainable parameters (so they travel with
/// checkpoints).
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub run_mean: ParamId,
    pub run_var: ParamId,
    pub dim: usize,
}

impl BatchNorm {
    pub fn init<S: Scalar>(ps: &mut ParamSet<S>, name: &str, dim: usize) -> Self {
        BatchNorm {
            gamma: ps.add(format!("{name}.gamma"), Tensor::filled(vec![dim], S::one()), true),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(vec![dim]), true),
            run_mean: ps.add(format!("{name}.run_mean"), Tensor::zeros(vec![dim]), false),
            run_var: ps.add(format!("{name}.run_var"), Tensor::filled(vec![dim], S::one()), false),
            dim,
        }
    }

    /// In train mode the running statistics are updated in place:
    /// `running = 0.9 * running + 0.1 * batch_stat` (unbiased variance).
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &mut ParamSet<S>,
        x: NodeId,
        mode: NormMode,
    ) -> Result<NodeId, ForwardError> {
        let gamma = tape.param(ps, self.gamma);
        let beta = tape.param(ps, self.beta);
        let rm = ps.get(self.run_mean).clone();
        let rv = ps.get(self.run_var).clone();
        let (y, stats) = tape.batchnorm(x, gamma, beta, &rm, &rv, mode, s(BN_EPS))?;
        if let Some(stats) = stats {
            let momentum = s::<S>(BN_MOMENTUM);
            ps.update_running(self.run_mean, &stats.mean, momentum);
            ps.update_running(self.run_var, &stats.var_unbiased, momentum);
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn init<S: Scalar>(ps: &mut ParamSet<S>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: ps.add(format!("{name}.gamma"), Tensor::filled(vec![dim], S::one()), true),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(vec![dim]), true),
            dim,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &ParamSet<S>,
        x: NodeId,
    ) -> Result<NodeId, ForwardError> {
        let gamma = tape.param(ps, self.gamma);
        let beta = tape.param(ps, self.beta);
        Ok(tape.layernorm(x, gamma, beta, s(LN_EPS))?)
    }
}

// ---- embedding stack -----------------------------------------------------

/// Per-token embedding MLP: `relu(bn(f2(relu(bn(f1(x))))))`, widening the
/// band features to the model width in two stages.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub f1: Linear,
    pub bn1: BatchNorm,
    pub f2: Linear,
    pub bn2: BatchNorm,
    pub f_in: usize,
    pub e: usize,
}

impl Embedding {
    pub fn init<S: Scalar>(ps: &mut ParamSet<S>, name: &str, f_in: usize, e: usize, rng: &mut Rng) -> Self {
        assert!(e % 2 == 0, "embedding width must be even, got {e}");
        let f1 = Linear::init(ps, &format!("{name}.f1"), f_in, e / 2, true, rng);
        let bn1 = BatchNorm::init(ps, &format!("{name}.bn1"), e / 2);
        let f2 = Linear::init(ps, &format!("{name}.f2"), e / 2, e, true, rng);
        let bn2 = BatchNorm::init(ps, &format!("{name}.bn2"), e);
        Embedding { f1, bn1, f2, bn2, f_in, e }
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &mut ParamSet<S>,
        x: NodeId,
        mode: NormMode,
    ) -> Result<NodeId, ForwardError> {
        let width = tape.value(x).last_dim();
        if width != self.f_in {
            return Err(ForwardError::Shape(format!(
                "embedding expects {} band features per channel, got {}",
                self.f_in, width
            )));
        }
        let h = self.f1.forward(tape, ps, x);
        let h = self.bn1.forward(tape, ps, h, mode)?;
        let h = tape.relu(h);
        let h = self.f2.forward(tape, ps, h);
        let h = self.bn2.forward(tape, ps, h, mode)?;
        Ok(tape.relu(h))
    }
}

/// Learnable additive position table of shape `(channels, embed)`. When
/// disabled no parameter exists and the forward pass is the identity, which
/// is indistinguishable from a zero table frozen forever.
#[derive(Clone, Debug)]
pub struct Positional {
    pub table: Option<ParamId>,
    pub c: usize,
    pub e: usize,
}

impl Positional {
    pub fn init<S: Scalar>(ps: &mut ParamSet<S>, name: &str, c: usize, e: usize, enabled: bool) -> Self {
        let table = enabled.then(|| ps.add(format!("{name}.table"), Tensor::zeros(vec![c, e]), true));
        Positional { table, c, e }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, ps: &ParamSet<S>, x: NodeId) -> NodeId {
        match self.table {
            Some(id) => {
                assert_eq!(
                    &tape.value(x).shape()[1..],
                    &[self.c, self.e][..],
                    "positional table does not match token layout"
                );
                let t = tape.param(ps, id);
                tape.add_broadcast(x, t)
            }
            None => x,
        }
    }
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1/(1-rate)`; eval mode is the
/// identity. The mask is drawn from the caller's stream, so a fixed seed
/// fixes the masks.
pub fn dropout<S: Scalar>(
    tape: &mut Tape<S>,
    rng: &mut Rng,
    x: NodeId,
    rate: f64,
    mode: NormMode,
) -> NodeId {
    if mode == NormMode::Eval || rate == 0.0 {
        return x;
    }
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1), got {rate}");
    let keep = 1.0 - rate;
    let scale = s::<S>(1.0 / keep);
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).numel();
    let mask_data: Vec<S> = (0..n)
        .map(|_| if rng.gen_bool(keep) { scale } else { S::zero() })
        .collect();
    let mask = tape.constant(Tensor::new(shape, mask_data));
    tape.mul(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, DEFAULT_STEP};

    fn rand_tensor(rng: &mut Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Tensor::new(shape, data)
    }

    #[test]
    fn fal_zero_input_gives_ones_zeros_bias() {
        let mut rng = Rng::new(1);
        let mut ps = ParamSet::<f64>::new();
        let fal = Fal::init(&mut ps, "fal", 3, 8, 4, &mut rng);
        // give the bias a recognizable value
        ps.get_mut(fal.b_n.unwrap()).data_mut().copy_from_slice(&[0.25, -0.5, 0.75, 1.25]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3]));
        let y = fal.forward(&mut tape, &ps, x);
        let out = tape.value(y).data();
        assert_eq!(out, &[1.0, 1.0, 0.0, 0.0, 0.25, -0.5, 0.75, 1.25]);
    }

    #[test]
    fn fal_without_periodic_part_is_bitwise_a_linear_layer() {
        let mut rng = Rng::new(2);
        let mut ps = ParamSet::<f64>::new();
        let fal = Fal::init(&mut ps, "fal", 4, 6, 0, &mut rng);
        // independent linear layer sharing the exact same weight values
        let mut ps2 = ParamSet::<f64>::new();
        let w = ps2.add("lin.w", ps.get(fal.w_n.unwrap()).clone(), true);
        let b = ps2.add("lin.b", ps.get(fal.b_n.unwrap()).clone(), true);
        let lin = Linear { w, b: Some(b), d_in: 4, d_out: 6 };

        let mut rng_x = Rng::new(3);
        let xt = rand_tensor(&mut rng_x, vec![2, 5, 4]);
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone());
        let y_fal = fal.forward(&mut tape, &ps, x);
        let mut tape2 = Tape::new();
        let x2 = tape2.constant(xt);
        let y_lin = lin.forward(&mut tape2, &ps2, x2);
        let a: Vec<u64> = tape.value(y_fal).data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = tape2.value(y_lin).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn fal_analytic_two_input_case() {
        let mut rng = Rng::new(4);
        let mut ps = ParamSet::<f64>::new();
        let fal = Fal::init(&mut ps, "fal", 2, 3, 2, &mut rng);
        // phase column picks out x[0]; affine sums both coordinates
        ps.get_mut(fal.w_p.unwrap()).data_mut().copy_from_slice(&[1.0, 0.0]);
        ps.get_mut(fal.w_n.unwrap()).data_mut().copy_from_slice(&[1.0, 1.0]);
        ps.get_mut(fal.b_n.unwrap()).data_mut().copy_from_slice(&[0.5]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![std::f64::consts::PI, 5.0]));
        let y = fal.forward(&mut tape, &ps, x);
        let out = tape.value(y).data();
        assert!((out[0] - (-1.0)).abs() < 1e-12); // cos(pi)
        assert!(out[1].abs() < 1e-12); // sin(pi)
        assert!((out[2] - (std::f64::consts::PI + 5.0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn fan_with_identity_activation_equals_fal() {
        let mut rng = Rng::new(5);
        let mut ps = ParamSet::<f64>::new();
        let fan = Fan::init(&mut ps, "fan", 3, 6, 2, Activation::Identity, &mut rng);
        let mut rng_x = Rng::new(6);
        let xt = rand_tensor(&mut rng_x, vec![4, 3]);
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone());
        let a = fan.forward(&mut tape, &ps, x);
        let x2 = tape.constant(xt);
        let b = fan.fal.forward(&mut tape, &ps, x2);
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }

    #[test]
    fn fan_zero_input_gelu_of_bias() {
        let mut rng = Rng::new(7);
        let mut ps = ParamSet::<f64>::new();
        let fan = Fan::init(&mut ps, "fan", 2, 4, 2, Activation::Gelu, &mut rng);
        ps.get_mut(fan.fal.b_n.unwrap()).data_mut().copy_from_slice(&[0.7, -0.3]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2]));
        let y = fan.forward(&mut tape, &ps, x);
        let out = tape.value(y).data();
        assert!((out[2] - crate::tape::gelu_scalar(0.7)).abs() < 1e-12);
        assert!((out[3] - crate::tape::gelu_scalar(-0.3)).abs() < 1e-12);
    }

    #[test]
    fn fan_random_case_matches_scalar_oracle() {
        let mut rng = Rng::new(8);
        let mut ps = ParamSet::<f64>::new();
        let (d_in, d_out, n_per) = (3, 7, 4);
        let fan = Fan::init(&mut ps, "fan", d_in, d_out, n_per, Activation::Gelu, &mut rng);
        let mut rng_x = Rng::new(9);
        let xt = rand_tensor(&mut rng_x, vec![2, d_in]);
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone());
        let y = fan.forward(&mut tape, &ps, x);
        let out = tape.value(y);

        // Independent scalar-loop computation.
        let wp = ps.get(fan.fal.w_p.unwrap());
        let wn = ps.get(fan.fal.w_n.unwrap());
        let bn = ps.get(fan.fal.b_n.unwrap());
        let half = n_per / 2;
        let n_ap = d_out - n_per;
        for r in 0..2 {
            for j in 0..half {
                let mut phase = 0.0;
                for i in 0..d_in {
                    phase += xt.data()[r * d_in + i] * wp.data()[i * half + j];
                }
                assert!((out.data()[r * d_out + j] - phase.cos()).abs() < 1e-12);
                assert!((out.data()[r * d_out + half + j] - phase.sin()).abs() < 1e-12);
            }
            for j in 0..n_ap {
                let mut a = bn.data()[j];
                for i in 0..d_in {
                    a += xt.data()[r * d_in + i] * wn.data()[i * n_ap + j];
                }
                let expect = Activation::Gelu.apply_scalar(a);
                assert!((out.data()[r * d_out + n_per + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fal_periodic_outputs_bounded() {
        let mut rng = Rng::new(10);
        let mut ps = ParamSet::<f64>::new();
        let fal = Fal::init(&mut ps, "fal", 5, 10, 6, &mut rng);
        for trial in 0..50 {
            let mut rng_x = Rng::new(100 + trial);
            let xt = rand_tensor(&mut rng_x, vec![3, 5]).map(|v| v * 50.0);
            let mut tape = Tape::new();
            let x = tape.constant(xt);
            let y = fal.forward(&mut tape, &ps, x);
            for r in 0..3 {
                for j in 0..6 {
                    let v = tape.value(y).data()[r * 10 + j];
                    assert!((-1.0..=1.0).contains(&v), "periodic output {v} escaped [-1,1]");
                }
            }
        }
    }

    #[test]
    fn fal_periodicity_under_integer_phase_shifts() {
        // Integer-valued W_p makes x -> x + 2*pi*e_j a full-period shift of
        // every phase coordinate.
        let mut rng = Rng::new(11);
        let mut ps = ParamSet::<f64>::new();
        let fal = Fal::init(&mut ps, "fal", 3, 8, 4, &mut rng);
        ps.get_mut(fal.w_p.unwrap())
            .data_mut()
            .copy_from_slice(&[1.0, 2.0, 3.0, -1.0, 0.0, 2.0]);
        let mut rng_x = Rng::new(12);
        let xt = rand_tensor(&mut rng_x, vec![1, 3]);
        let two_pi = 2.0 * std::f64::consts::PI;
        for j in 0..3 {
            let mut shifted = xt.clone();
            shifted.data_mut()[j] += two_pi;
            let mut tape = Tape::new();
            let a = tape.constant(xt.clone());
            let b = tape.constant(shifted);
            let ya = fal.forward(&mut tape, &ps, a);
            let yb = fal.forward(&mut tape, &ps, b);
            for k in 0..4 {
                let d = (tape.value(ya).data()[k] - tape.value(yb).data()[k]).abs();
                assert!(d < 1e-5, "periodicity violated by {d} at coord {k}");
            }
        }
    }

    #[test]
    fn embedding_shape_and_zero_case() {
        let mut rng = Rng::new(13);
        let mut ps = ParamSet::<f64>::new();
        let emb = Embedding::init(&mut ps, "embed", 5, 8, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![3, 4, 5]));
        let y = emb.forward(&mut tape, &mut ps, x, NormMode::Eval).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 4, 8]);

        // zero weights + eval-identity BN -> zero output
        let mut ps0 = ParamSet::<f64>::new();
        let emb0 = Embedding::init(&mut ps0, "embed", 5, 8, &mut Rng::new(14));
        for id in [emb0.f1.w, emb0.f2.w] {
            for v in ps0.get_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let mut rng_x = Rng::new(15);
        let x = tape.constant(rand_tensor(&mut rng_x, vec![2, 3, 5]));
        let y = emb0.forward(&mut tape, &mut ps0, x, NormMode::Eval).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_rejects_band_mismatch() {
        let mut rng = Rng::new(16);
        let mut ps = ParamSet::<f64>::new();
        let emb = Embedding::init(&mut ps, "embed", 5, 8, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 4]));
        assert!(matches!(
            emb.forward(&mut tape, &mut ps, x, NormMode::Eval),
            Err(ForwardError::Shape(_))
        ));
    }

    #[test]
    fn embedding_eval_forward_matches_scalar_oracle() {
        let (f_in, e) = (3, 4);
        let mut rng = Rng::new(17);
        let mut ps = ParamSet::<f64>::new();
        let emb = Embedding::init(&mut ps, "embed", f_in, e, &mut rng);
        // non-trivial running stats and norm parameters
        ps.get_mut(emb.bn1.run_mean).data_mut().copy_from_slice(&[0.1, -0.2]);
        ps.get_mut(emb.bn1.run_var).data_mut().copy_from_slice(&[1.5, 0.7]);
        ps.get_mut(emb.bn1.gamma).data_mut().copy_from_slice(&[1.2, 0.8]);
        ps.get_mut(emb.bn1.beta).data_mut().copy_from_slice(&[0.05, -0.05]);

        let mut rng_x = Rng::new(18);
        let xt = rand_tensor(&mut rng_x, vec![1, 1, f_in]);
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone());
        let y = emb.forward(&mut tape, &mut ps, x, NormMode::Eval).unwrap();
        let got = tape.value(y).data().to_vec();

        // Scalar re-computation of the whole stack.
        let lin = |x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>, d_in: usize, d_out: usize| -> Vec<f64> {
            (0..d_out)
                .map(|j| {
                    let mut acc = b.data()[j];
                    for i in 0..d_in {
                        acc += x[i] * w.data()[i * d_out + j];
                    }
                    acc
                })
                .collect()
        };
        let bn_eval = |x: &[f64], bn: &BatchNorm, ps: &ParamSet<f64>| -> Vec<f64> {
            x.iter()
                .enumerate()
                .map(|(j, &v)| {
                    let m = ps.get(bn.run_mean).data()[j];
                    let var = ps.get(bn.run_var).data()[j];
                    let xh = (v - m) / (var + BN_EPS).sqrt();
                    ps.get(bn.gamma).data()[j] * xh + ps.get(bn.beta).data()[j]
                })
                .collect()
        };
        let relu = |x: Vec<f64>| -> Vec<f64> { x.into_iter().map(|v| v.max(0.0)).collect() };
        let h = lin(xt.data(), ps.get(emb.f1.w), ps.get(emb.f1.b.unwrap()), f_in, e / 2);
        let h = relu(bn_eval(&h, &emb.bn1, &ps));
        let h = lin(&h, ps.get(emb.f2.w), ps.get(emb.f2.b.unwrap()), e / 2, e);
        let h = relu(bn_eval(&h, &emb.bn2, &ps));
        for (a, b) in got.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn embedding_train_updates_running_stats() {
        let mut rng = Rng::new(19);
        let mut ps = ParamSet::<f64>::new();
        let emb = Embedding::init(&mut ps, "embed", 5, 8, &mut rng);
        let before = ps.get(emb.bn1.run_mean).data().to_vec();
        let mut tape = Tape::new();
        let mut rng_x = Rng::new(20);
        let x = tape.constant(rand_tensor(&mut rng_x, vec![4, 2, 5]));
        emb.forward(&mut tape, &mut ps, x, NormMode::Train).unwrap();
        let after = ps.get(emb.bn1.run_mean).data().to_vec();
        assert_ne!(before, after, "running mean should move in train mode");
    }

    #[test]
    fn positional_disabled_is_identity_enabled_adds() {
        let mut ps = ParamSet::<f64>::new();
        let off = Positional::init(&mut ps, "pos_off", 3, 4, false);
        let on = Positional::init(&mut ps, "pos_on", 3, 4, true);
        ps.get_mut(on.table.unwrap()).data_mut()[5] = 2.5;
        let mut rng_x = Rng::new(21);
        let xt = rand_tensor(&mut rng_x, vec![2, 3, 4]);
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone());
        let y_off = off.forward(&mut tape, &ps, x);
        assert_eq!(y_off, x, "disabled positional must be a no-op node");
        let y_on = on.forward(&mut tape, &ps, x);
        let got = tape.value(y_on).data();
        for b in 0..2 {
            for i in 0..12 {
                let expect = xt.data()[b * 12 + i] + if i == 5 { 2.5 } else { 0.0 };
                assert!((got[b * 12 + i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_eval_is_identity_and_train_masks() {
        let mut rng = Rng::new(22);
        let mut tape = Tape::new();
        let mut rng_x = Rng::new(23);
        let xt = rand_tensor(&mut rng_x, vec![10, 10]).map(|v| v + 3.0);
        let x = tape.constant(xt.clone());
        let y_eval = dropout(&mut tape, &mut rng, x, 0.5, NormMode::Eval);
        assert_eq!(y_eval, x);
        let y0 = dropout(&mut tape, &mut rng, x, 0.0, NormMode::Train);
        assert_eq!(y0, x);

        let y = dropout(&mut tape, &mut rng, x, 0.5, NormMode::Train);
        let out = tape.value(y).data();
        let zeros = out.iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 20 && zeros < 80, "zeroed {zeros}/100 at rate 0.5");
        for (o, i) in out.iter().zip(xt.data()) {
            assert!(*o == 0.0 || (*o - i * 2.0).abs() < 1e-12, "survivors are scaled by 1/keep");
        }
    }

    /// Finite-difference check of a layer through its real forward code:
    /// leaf 0 is the input, remaining leaves are pre-bound to the trainable
    /// parameters in declaration order.
    fn check_layer<F>(name: &str, ps: &ParamSet<f64>, x: Tensor<f64>, forward: F)
    where
        F: Fn(&mut Tape<f64>, &mut ParamSet<f64>, NodeId) -> Result<NodeId, ForwardError>,
    {
        let trainable = ps.trainable_ids();
        let mut inputs = vec![x];
        for &id in &trainable {
            inputs.push(ps.get(id).clone());
        }
        check_gradients(name, &inputs, DEFAULT_STEP, None, |t, l| {
            for (k, &id) in trainable.iter().enumerate() {
                t.bind_param(id, l[k + 1]);
            }
            let mut ps_run = ps.clone();
            let y = forward(t, &mut ps_run, l[0]).map_err(|e| match e {
                ForwardError::Numeric(n) => n,
                ForwardError::Shape(m) => panic!("unexpected shape error in gradcheck: {m}"),
            })?;
            let sq = t.mul(y, y);
            Ok(t.sum_all(sq))
        })
        .unwrap()
        .assert_below(1e-6);
    }

    #[test]
    fn fal_gradients_pass_finite_differences() {
        let mut rng = Rng::new(24);
        let mut ps = ParamSet::<f64>::new();
        let fal = Fal::init(&mut ps, "fal", 3, 6, 2, &mut rng);
        let x = Tensor::new(vec![2, 3], vec![0.3, -0.8, 0.5, 1.1, 0.2, -0.4]);
        check_layer("fal", &ps, x, |t, ps, x| Ok(fal.forward(t, ps, x)));
    }

    #[test]
    fn fan_gradients_pass_finite_differences() {
        let mut rng = Rng::new(26);
        let mut ps = ParamSet::<f64>::new();
        let fan = Fan::init(&mut ps, "fan", 3, 6, 2, Activation::Gelu, &mut rng);
        let x = Tensor::new(vec![2, 3], vec![0.6, -0.2, 0.8, -1.0, 0.4, 0.9]);
        check_layer("fan", &ps, x, |t, ps, x| Ok(fan.forward(t, ps, x)));
    }

    #[test]
    fn embedding_gradients_pass_finite_differences() {
        let mut rng = Rng::new(25);
        let mut ps = ParamSet::<f64>::new();
        let emb = Embedding::init(&mut ps, "embed", 3, 4, &mut rng);
        let x = Tensor::new(
            vec![3, 2, 3],
            vec![
                0.2, -0.5, 0.9, 0.4, 0.1, -0.3, //
                -0.7, 0.6, 0.2, 0.8, -0.1, 0.5, //
                0.3, 0.3, -0.9, -0.2, 0.7, 0.1,
            ],
        );
        let e2 = emb.clone();
        check_layer("embedding", &ps, x, move |t, ps, x| {
            e2.forward(t, ps, x, NormMode::Train)
        });
    }
}
