//! Synthetic multichannel EEG with known structure: class-specific band
//! signatures carried by latent oscillators that coupled channel pairs
//! share, lone impostor channels that mimic the power signature without an
//! agreeing partner, pink-like background noise, and per-subject band
//! gains. The generator returns raw signals, the derived band features, and
//! the ground truth needed to score edge recovery.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::de::{compute_de, BAND_EDGES, BAND_NAMES, N_BANDS};
use super::{default_channel_names, FeatureDataset};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
    #[error("feature extraction failed: {0}")]
    Features(#[from] super::de::DeError),
}

/// Everything the generator needs; serializable so runs are reproducible
/// from a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(default = "default_subjects")]
    pub n_subjects: usize,
    #[serde(default = "default_trials")]
    pub trials_per_subject: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_fs")]
    pub sample_rate: f64,
    #[serde(default = "default_window")]
    pub window_seconds: f64,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    /// Band indices (into the canonical five) on which each class's active
    /// coupled pairs carry their shared boosted oscillator.
    #[serde(default = "default_signatures")]
    pub class_signatures: Vec<Vec<usize>>,
    /// Channel pairs that can share latent oscillators.
    #[serde(default = "default_edges")]
    pub coupling_edges: Vec<(usize, usize)>,
    /// How many coupling edges light up per trial. Each active edge puts one
    /// shared oscillator on both endpoints on every signature band of the
    /// trial's class. 0 means all edges are always active.
    #[serde(default = "default_active_edges")]
    pub active_edges_per_trial: usize,
    /// How many inactive channels per trial get a loud lone oscillator on
    /// another class's signature band. Impostors have no agreeing partner,
    /// which is what distinguishes them from genuinely active channels.
    #[serde(default = "default_impostors")]
    pub impostors_per_trial: usize,
    /// Amplitude multiplier for impostor oscillators.
    #[serde(default = "default_impostor_boost")]
    pub impostor_boost: f64,
    /// Spread of the per-subject log-normal band gains.
    #[serde(default = "default_shift")]
    pub subject_shift_scale: f64,
    /// Pink-noise floor amplitude.
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
    /// Spread of the per-(trial, oscillator) log-normal amplitude envelope.
    /// One draw is shared by both endpoints of an active edge, which is what
    /// makes their band powers agree while lone channels wander.
    #[serde(default = "default_envelope")]
    pub envelope_sigma: f64,
    /// Amplitude multiplier for the shared oscillator on signature bands.
    #[serde(default = "default_boost")]
    pub signature_boost: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_subjects() -> usize {
    5
}
fn default_trials() -> usize {
    132
}
fn default_channels() -> usize {
    16
}
fn default_fs() -> f64 {
    200.0
}
fn default_window() -> f64 {
    4.0
}
fn default_classes() -> usize {
    3
}
fn default_signatures() -> Vec<Vec<usize>> {
    // theta, alpha, beta
    vec![vec![1], vec![2], vec![3]]
}
fn default_shift() -> f64 {
    0.2
}
fn default_noise() -> f64 {
    0.3
}
fn default_envelope() -> f64 {
    0.32
}
fn default_boost() -> f64 {
    2.7
}
fn default_active_edges() -> usize {
    3
}
fn default_impostors() -> usize {
    10
}
fn default_impostor_boost() -> f64 {
    2.96
}

/// A path visiting all 16 channels in a fixed scrambled order; consecutive
/// pairs are the 15 default coupling edges.
const DEFAULT_PATH_16: [usize; 16] = [0, 9, 3, 14, 6, 1, 11, 4, 13, 8, 2, 15, 5, 10, 7, 12];

fn default_edges() -> Vec<(usize, usize)> {
    path_edges(&DEFAULT_PATH_16)
}

fn path_edges(order: &[usize]) -> Vec<(usize, usize)> {
    order.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Deterministic path edges for an arbitrary channel count.
pub fn scrambled_path_edges(channels: usize) -> Vec<(usize, usize)> {
    if channels == 16 {
        return default_edges();
    }
    let mut order: Vec<usize> = (0..channels).collect();
    let mut rng = Rng::derive(0x5EED_ED6E, channels as u64);
    rng.shuffle(&mut order);
    path_edges(&order)
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_subjects: default_subjects(),
            trials_per_subject: default_trials(),
            channels: default_channels(),
            sample_rate: default_fs(),
            window_seconds: default_window(),
            n_classes: default_classes(),
            class_signatures: default_signatures(),
            coupling_edges: default_edges(),
            active_edges_per_trial: default_active_edges(),
            impostors_per_trial: default_impostors(),
            impostor_boost: default_impostor_boost(),
            subject_shift_scale: default_shift(),
            noise_scale: default_noise(),
            envelope_sigma: default_envelope(),
            signature_boost: default_boost(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::BadSpec(m));
        if self.n_subjects == 0 || self.trials_per_subject == 0 {
            return bad("need at least one subject and one trial".into());
        }
        if self.channels < 2 {
            return bad("need at least 2 channels".into());
        }
        if self.n_classes < 2 {
            return bad("need at least 2 classes".into());
        }
        if self.class_signatures.len() != self.n_classes {
            return bad(format!(
                "{} class signatures for {} classes",
                self.class_signatures.len(),
                self.n_classes
            ));
        }
        for sig in &self.class_signatures {
            for &b in sig {
                if b >= N_BANDS {
                    return bad(format!("signature band index {b} out of range"));
                }
            }
        }
        for &(u, v) in &self.coupling_edges {
            if u >= self.channels || v >= self.channels || u == v {
                return bad(format!("coupling edge ({u}, {v}) invalid for {} channels", self.channels));
            }
        }
        if self.sample_rate <= 2.0 * BAND_EDGES[N_BANDS - 1].1 {
            return bad(format!("sample rate {} too low for the top band", self.sample_rate));
        }
        if self.window_seconds * self.sample_rate < 2.0 {
            return bad("window too short".into());
        }
        if self.noise_scale < 0.0 || self.envelope_sigma < 0.0 || self.subject_shift_scale < 0.0 {
            return bad("scales must be non-negative".into());
        }
        if self.signature_boost < 1.0 {
            return bad("signature boost must be at least 1".into());
        }
        if self.active_edges_per_trial > self.coupling_edges.len() {
            return bad(format!(
                "{} active edges per trial but only {} coupling edges",
                self.active_edges_per_trial,
                self.coupling_edges.len()
            ));
        }
        if self.impostors_per_trial >= self.channels {
            return bad(format!(
                "{} impostors per trial for {} channels",
                self.impostors_per_trial, self.channels
            ));
        }
        if self.impostor_boost < 0.0 || !self.impostor_boost.is_finite() {
            return bad("impostor boost must be non-negative and finite".into());
        }
        Ok(())
    }

    pub fn samples_per_trial(&self) -> usize {
        (self.window_seconds * self.sample_rate).round() as usize
    }
}

/// What the generator knows and the model is asked to rediscover.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruth {
    pub coupling_edges: Vec<(usize, usize)>,
    pub class_signatures: Vec<Vec<String>>,
    pub subject_band_gains: Vec<Vec<f64>>,
    pub spec: SyntheticSpec,
}

/// 1/sqrt(f)-shaped noise, unit variance before scaling.
fn pink_noise(rng: &mut Rng, n: usize, fs: f64, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(rng.normal(), 0.0)).collect();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    fwd.process(&mut buf);
    let df = fs / n as f64;
    for k in 0..n {
        let f = if k <= n / 2 { k as f64 * df } else { (n - k) as f64 * df };
        buf[k] *= 1.0 / f.max(1.0).sqrt();
    }
    buf[0] = Complex::new(0.0, 0.0);
    inv.process(&mut buf);
    let scale = 1.0 / n as f64;
    let mut out: Vec<f64> = buf.iter().map(|v| v.re * scale).collect();
    let var = out.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if var > 0.0 {
        let s = 1.0 / var.sqrt();
        for v in out.iter_mut() {
            *v *= s;
        }
    }
    out
}

const BASE_AMP: f64 = 0.6;
/// Per-channel multiplicative jitter on each shared oscillator, so coupled
/// channels are strongly but not perfectly correlated.
const CHANNEL_JITTER: f64 = 0.1;
/// Margin keeping oscillator frequencies inside their band.
const FREQ_MARGIN: f64 = 0.2;

/// Stream labels: subject traits and trials must not share streams.
fn subject_stream(s: usize) -> u64 {
    1_000_000 + s as u64
}
fn trial_stream(s: usize, t: usize) -> u64 {
    2_000_000 + (s as u64) * 100_000 + t as u64
}

/// Generate the full dataset. Returns per-trial raw `[channels, samples]`
/// signals, the band-feature dataset, and the ground truth.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
) -> Result<(Vec<Tensor<f64>>, FeatureDataset, GroundTruth), SynthError> {
    spec.validate()?;
    let c = spec.channels;
    let t_len = spec.samples_per_trial();
    let fs = spec.sample_rate;
    let n = spec.n_subjects * spec.trials_per_subject;

    // frozen per-subject band gains
    let subject_gains: Vec<Vec<f64>> = (0..spec.n_subjects)
        .map(|s| {
            let mut rng = Rng::derive(spec.seed, subject_stream(s));
            (0..N_BANDS)
                .map(|_| (spec.subject_shift_scale * rng.normal()).exp())
                .collect()
        })
        .collect();

    // bands an impostor may use per class: other classes' signature bands
    // minus the class's own
    let impostor_bands: Vec<Vec<usize>> = (0..spec.n_classes)
        .map(|cl| {
            let own = &spec.class_signatures[cl];
            let mut pool: Vec<usize> = spec
                .class_signatures
                .iter()
                .enumerate()
                .filter(|&(other, _)| other != cl)
                .flat_map(|(_, sig)| sig.iter().copied())
                .filter(|b| !own.contains(b))
                .collect();
            pool.sort_unstable();
            pool.dedup();
            pool
        })
        .collect();

    let mut planner = FftPlanner::new();
    let mut raw = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut subject_id = Vec::with_capacity(n);
    let mut feat_data: Vec<f32> = Vec::with_capacity(n * c * N_BANDS);

    for s in 0..spec.n_subjects {
        for t in 0..spec.trials_per_subject {
            let class = t % spec.n_classes;
            let mut rng = Rng::derive(spec.seed, trial_stream(s, t));
            let mut sig = vec![0.0f64; c * t_len];

            // background noise, one independent stream segment per channel
            if spec.noise_scale > 0.0 {
                for ch in 0..c {
                    let noise = pink_noise(&mut rng, t_len, fs, &mut planner);
                    for i in 0..t_len {
                        sig[ch * t_len + i] += spec.noise_scale * noise[i];
                    }
                }
            }

            // Active coupled pairs: a random subset of the coupling edges
            // lights up. Both endpoints of an active edge share one boosted
            // oscillator (same envelope, frequency and phase, small
            // per-channel jitter) on every signature band of the trial's
            // class, so their band powers agree within the trial. The
            // agreement survives per-subject gains, which scale both
            // endpoints identically.
            let n_edges = spec.coupling_edges.len();
            let m = if spec.active_edges_per_trial == 0 {
                n_edges
            } else {
                spec.active_edges_per_trial
            };
            let mut edge_idx: Vec<usize> = (0..n_edges).collect();
            rng.shuffle(&mut edge_idx);
            edge_idx.truncate(m);
            edge_idx.sort_unstable();
            let mut active = vec![false; c];
            for &e in &edge_idx {
                let (u, v) = spec.coupling_edges[e];
                active[u] = true;
                active[v] = true;
                for &b in &spec.class_signatures[class] {
                    let (lo, hi) = BAND_EDGES[b];
                    let hi_eff = hi.min(fs / 2.0 - 1.0);
                    let gain = subject_gains[s][b];
                    let envelope = (spec.envelope_sigma * rng.normal()).exp();
                    let amp = BASE_AMP * spec.signature_boost * gain * envelope;
                    let freq = rng.uniform(lo + FREQ_MARGIN, hi_eff - FREQ_MARGIN);
                    let phase = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
                    let ju = 1.0 + rng.uniform(-CHANNEL_JITTER, CHANNEL_JITTER);
                    let jv = 1.0 + rng.uniform(-CHANNEL_JITTER, CHANNEL_JITTER);
                    let w = 2.0 * std::f64::consts::PI * freq / fs;
                    for i in 0..t_len {
                        let osc = (w * i as f64 + phase).sin();
                        sig[u * t_len + i] += amp * ju * osc;
                        sig[v * t_len + i] += amp * jv * osc;
                    }
                }
            }

            // Impostors: lone inactive channels carrying a louder oscillator
            // on another class's signature band. They have no agreeing
            // partner, so cross-channel agreement is the only cue separating
            // them from active channels once amplitudes overlap.
            if spec.impostors_per_trial > 0 && !impostor_bands[class].is_empty() {
                let mut pool: Vec<usize> = (0..c).filter(|&ch| !active[ch]).collect();
                rng.shuffle(&mut pool);
                pool.truncate(spec.impostors_per_trial);
                pool.sort_unstable();
                for &ch in &pool {
                    let band_pool = &impostor_bands[class];
                    let b = band_pool[rng.below(band_pool.len())];
                    let (lo, hi) = BAND_EDGES[b];
                    let hi_eff = hi.min(fs / 2.0 - 1.0);
                    let gain = subject_gains[s][b];
                    let envelope = (spec.envelope_sigma * rng.normal()).exp();
                    let amp = BASE_AMP * spec.impostor_boost * gain * envelope;
                    let freq = rng.uniform(lo + FREQ_MARGIN, hi_eff - FREQ_MARGIN);
                    let phase = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
                    let j = 1.0 + rng.uniform(-CHANNEL_JITTER, CHANNEL_JITTER);
                    let w = 2.0 * std::f64::consts::PI * freq / fs;
                    for i in 0..t_len {
                        sig[ch * t_len + i] += amp * j * (w * i as f64 + phase).sin();
                    }
                }
            }

            let trial = Tensor::new(vec![c, t_len], sig);
            let de = compute_de(&trial, fs, spec.window_seconds)?;
            debug_assert_eq!(de.shape()[0], 1);
            feat_data.extend(de.data().iter().map(|&v| v as f32));
            raw.push(trial);
            labels.push(class as u32);
            subject_id.push(s as u32);
        }
    }

    let ds = FeatureDataset {
        samples: Tensor::new(vec![n, c, N_BANDS], feat_data),
        labels,
        subject_id,
        session_id: vec![0; n],
        band_names: BAND_NAMES.iter().map(|s| s.to_string()).collect(),
        channel_names: default_channel_names(c),
        n_classes: spec.n_classes,
    };
    let truth = GroundTruth {
        coupling_edges: spec.coupling_edges.clone(),
        class_signatures: spec
            .class_signatures
            .iter()
            .map(|sig| sig.iter().map(|&b| BAND_NAMES[b].to_string()).collect())
            .collect(),
        subject_band_gains: subject_gains,
        spec: spec.clone(),
    };
    Ok((raw, ds, truth))
}
