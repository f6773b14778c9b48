//! Train-time feature augmentation: per-band random scaling, a sine-shaped
//! perturbation along the band axis, and Mixup with soft labels. All three
//! operate on copies of `[channels, bands]` feature blocks; disabled
//! augmentations are exact identities and consume no randomness.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    #[serde(default = "default_true")]
    pub band_scale: bool,
    #[serde(default = "default_true")]
    pub sine: bool,
    #[serde(default = "default_true")]
    pub mixup: bool,
    /// One uniformly chosen band is scaled by a factor from this range.
    #[serde(default = "default_scale_range")]
    pub band_scale_range: (f64, f64),
    /// Cycles of the perturbation across the normalized band axis.
    #[serde(default = "default_sine_freq")]
    pub sine_freq: f64,
    #[serde(default = "default_sine_amp")]
    pub sine_amp: f64,
    #[serde(default = "default_mixup_alpha")]
    pub mixup_alpha: f64,
}

fn default_true() -> bool {
    true
}
fn default_scale_range() -> (f64, f64) {
    (0.9, 1.1)
}
fn default_sine_freq() -> f64 {
    2.0
}
fn default_sine_amp() -> f64 {
    0.05
}
fn default_mixup_alpha() -> f64 {
    0.2
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            band_scale: true,
            sine: true,
            mixup: true,
            band_scale_range: default_scale_range(),
            sine_freq: default_sine_freq(),
            sine_amp: default_sine_amp(),
            mixup_alpha: default_mixup_alpha(),
        }
    }
}

/// Identity configuration (every augmentation off).
pub fn no_augment() -> AugmentConfig {
    AugmentConfig {
        band_scale: false,
        sine: false,
        mixup: false,
        ..Default::default()
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), String> {
        let (lo, hi) = self.band_scale_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(format!("band scale range ({lo}, {hi}) must be positive and ordered"));
        }
        if !(self.sine_amp >= 0.0 && self.sine_amp.is_finite() && self.sine_freq.is_finite()) {
            return Err("sine perturbation parameters must be finite, amplitude non-negative".into());
        }
        if self.mixup && self.mixup_alpha <= 0.0 {
            return Err(format!("mixup alpha must be positive, got {}", self.mixup_alpha));
        }
        Ok(())
    }
}

/// Scale one uniformly chosen band by `u ~ Uniform(range)` across every
/// channel.
pub fn band_scale_augment(x: &mut [f32], channels: usize, bands: usize, rng: &mut Rng, cfg: &AugmentConfig) {
    if !cfg.band_scale {
        return;
    }
    assert_eq!(x.len(), channels * bands);
    let band = rng.below(bands);
    let u = rng.uniform(cfg.band_scale_range.0, cfg.band_scale_range.1) as f32;
    for ch in 0..channels {
        x[ch * bands + band] *= u;
    }
}

/// Add `amp * sin(freq * 2*pi * f/bands + phi)` along the band axis, one
/// random phase per call, the same curve on every channel.
pub fn sine_perturb(x: &mut [f32], channels: usize, bands: usize, rng: &mut Rng, cfg: &AugmentConfig) {
    if !cfg.sine || cfg.sine_amp == 0.0 {
        return;
    }
    assert_eq!(x.len(), channels * bands);
    let phi = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
    for f in 0..bands {
        let t = f as f64 / bands as f64;
        let delta = (cfg.sine_amp * (cfg.sine_freq * 2.0 * std::f64::consts::PI * t + phi).sin()) as f32;
        for ch in 0..channels {
            x[ch * bands + f] += delta;
        }
    }
}

/// Mixing coefficient `lambda ~ Beta(alpha, alpha)`.
pub fn mixup_lambda(rng: &mut Rng, alpha: f64) -> f64 {
    assert!(alpha > 0.0, "mixup alpha must be positive, got {alpha}");
    rng.beta_symmetric(alpha)
}

/// `lambda * a + (1 - lambda) * b`, elementwise.
pub fn mixup_with_lambda(xa: &[f32], xb: &[f32], lambda: f32) -> Vec<f32> {
    assert_eq!(xa.len(), xb.len(), "mixup inputs must share a shape");
    xa.iter()
        .zip(xb)
        .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
        .collect()
}

/// Soft label row for a mixed pair of hard labels.
pub fn blend_labels(ya: usize, yb: usize, n_classes: usize, lambda: f32) -> Vec<f32> {
    assert!(ya < n_classes && yb < n_classes);
    let mut row = vec![0.0f32; n_classes];
    row[ya] += lambda;
    row[yb] += 1.0 - lambda;
    row
}
