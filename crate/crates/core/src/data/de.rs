//! Differential-entropy band features.
//!
//! A multichannel time-domain window is reduced to one feature per channel
//! per canonical frequency band: `0.5 * ln(2*pi*e * P)` where `P` is the
//! band-limited variance estimated from a Hann-windowed one-sided
//! periodogram. The periodogram is normalized so that summing all bins
//! recovers the window's variance, which makes `P` directly comparable to a
//! time-domain band-passed variance.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::tensor::Tensor;

/// Canonical band names, low to high frequency.
pub const BAND_NAMES: [&str; 5] = ["delta", "theta", "alpha", "beta", "gamma"];

/// Half-open band edges in Hz: delta [1,4), theta [4,8), alpha [8,14),
/// beta [14,31), gamma [31,50).
pub const BAND_EDGES: [(f64, f64); 5] =
    [(1.0, 4.0), (4.0, 8.0), (8.0, 14.0), (14.0, 31.0), (31.0, 50.0)];

pub const N_BANDS: usize = 5;

/// Band power is floored here before the logarithm so silent bands produce a
/// finite feature instead of negative infinity.
pub const POWER_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum DeError {
    #[error("sample rate {0} Hz cannot resolve the top band edge ({1} Hz); need more than twice that")]
    SampleRateTooLow(f64, f64),
    #[error("window of {want} samples does not fit the signal of {have} samples")]
    WindowTooLong { want: usize, have: usize },
    #[error("window must span at least 2 samples, got {0}")]
    WindowTooShort(usize),
    #[error("signal contains non-finite values")]
    NonFinite,
}

/// Differential entropy of a zero-mean source with variance `p`.
pub fn de_from_power(p: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * p.max(POWER_FLOOR)).ln()
}

/// One-sided periodogram of one window: returns per-bin power for bins
/// `0..=n/2` with bin `k` at `k * fs / n` Hz. A periodic Hann window is
/// applied after removing the window mean; the normalization makes the sum
/// over all bins an estimate of the window's variance.
pub fn periodogram(x: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = x.len();
    assert!(n >= 2, "periodogram needs at least 2 samples");
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut window_energy = 0.0;
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|i| {
            let w = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos());
            window_energy += w * w;
            Complex::new((x[i] - mean) * w, 0.0)
        })
        .collect();
    let fft = planner.plan_fft_forward(n);
    fft.process(&mut buf);
    let norm = 1.0 / (n as f64 * window_energy);
    let half = n / 2;
    (0..=half)
        .map(|k| {
            let two_sided = buf[k].norm_sqr() * norm;
            if k == 0 || (n % 2 == 0 && k == half) {
                two_sided
            } else {
                2.0 * two_sided
            }
        })
        .collect()
}

/// Sum of periodogram bins whose center frequency lies in `[lo, hi)`.
pub fn band_power(power: &[f64], n: usize, fs: f64, lo: f64, hi: f64) -> f64 {
    let df = fs / n as f64;
    let mut acc = 0.0;
    for (k, &p) in power.iter().enumerate() {
        let f = k as f64 * df;
        if f >= lo && f < hi {
            acc += p;
        }
    }
    acc
}

/// Differential-entropy features for a `[channels, samples]` signal, cut
/// into non-overlapping windows of `window_seconds`; any trailing partial
/// window is discarded. Returns `[n_windows, channels, 5]`.
pub fn compute_de(
    signal: &Tensor<f64>,
    sample_rate: f64,
    window_seconds: f64,
) -> Result<Tensor<f64>, DeError> {
    assert_eq!(signal.shape().len(), 2, "signal must be [channels, samples]");
    let top_edge = BAND_EDGES[N_BANDS - 1].1;
    if sample_rate <= 2.0 * top_edge {
        return Err(DeError::SampleRateTooLow(sample_rate, top_edge));
    }
    if !signal.is_finite() {
        return Err(DeError::NonFinite);
    }
    let c = signal.shape()[0];
    let t = signal.shape()[1];
    let win = (window_seconds * sample_rate).round() as usize;
    if win < 2 {
        return Err(DeError::WindowTooShort(win));
    }
    if win > t {
        return Err(DeError::WindowTooLong { want: win, have: t });
    }
    let n_windows = t / win;
    let mut planner = FftPlanner::new();
    let mut out = vec![0.0f64; n_windows * c * N_BANDS];
    for w_idx in 0..n_windows {
        for ch in 0..c {
            let start = ch * t + w_idx * win;
            let seg = &signal.data()[start..start + win];
            let power = periodogram(seg, &mut planner);
            for (b, &(lo, hi)) in BAND_EDGES.iter().enumerate() {
                let p = band_power(&power, win, sample_rate, lo, hi);
                out[(w_idx * c + ch) * N_BANDS + b] = de_from_power(p);
            }
        }
    }
    Ok(Tensor::new(vec![n_windows, c, N_BANDS], out))
}
