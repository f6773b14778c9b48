//! Band-feature datasets: extraction, synthesis, storage, augmentation and
//! split construction.

pub mod augment;
pub mod de;
pub mod io;
pub mod splits;
pub mod synth;

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset invariant violated: {0}")]
    Invalid(String),
    #[error("unknown band {0:?}")]
    UnknownBand(String),
    #[error("band selection must be nonempty")]
    EmptySelection,
    #[error("duplicate band {0:?} in selection")]
    DuplicateBand(String),
}

/// In-memory feature dataset: `samples` is `[N, channels, bands]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    pub samples: Tensor<f32>,
    pub labels: Vec<u32>,
    pub subject_id: Vec<u32>,
    pub session_id: Vec<u32>,
    pub band_names: Vec<String>,
    pub channel_names: Vec<String>,
    pub n_classes: usize,
}

impl FeatureDataset {
    pub fn n(&self) -> usize {
        self.samples.shape()[0]
    }
    pub fn channels(&self) -> usize {
        self.samples.shape()[1]
    }
    pub fn bands(&self) -> usize {
        self.samples.shape()[2]
    }

    /// One sample's `[channels, bands]` block.
    pub fn sample(&self, i: usize) -> &[f32] {
        let stride = self.channels() * self.bands();
        &self.samples.data()[i * stride..(i + 1) * stride]
    }

    /// Sorted list of distinct subject ids.
    pub fn subjects(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.subject_id.clone();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let shape = self.samples.shape();
        if shape.len() != 3 {
            return Err(DatasetError::Invalid(format!(
                "samples must be [n, channels, bands], got {shape:?}"
            )));
        }
        let n = shape[0];
        for (name, len) in [
            ("labels", self.labels.len()),
            ("subject_id", self.subject_id.len()),
            ("session_id", self.session_id.len()),
        ] {
            if len != n {
                return Err(DatasetError::Invalid(format!(
                    "{name} has {len} entries for {n} samples"
                )));
            }
        }
        if self.band_names.len() != shape[2] {
            return Err(DatasetError::Invalid(format!(
                "{} band names for {} bands",
                self.band_names.len(),
                shape[2]
            )));
        }
        if self.channel_names.len() != shape[1] {
            return Err(DatasetError::Invalid(format!(
                "{} channel names for {} channels",
                self.channel_names.len(),
                shape[1]
            )));
        }
        if self.n_classes < 2 {
            return Err(DatasetError::Invalid(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= self.n_classes) {
            return Err(DatasetError::Invalid(format!(
                "label {bad} out of range for {} classes",
                self.n_classes
            )));
        }
        if !self.samples.is_finite() {
            return Err(DatasetError::Invalid("samples contain non-finite values".into()));
        }
        Ok(())
    }

    /// New dataset keeping only the named bands, in the order given.
    pub fn select_bands(&self, keep: &[&str]) -> Result<FeatureDataset, DatasetError> {
        if keep.is_empty() {
            return Err(DatasetError::EmptySelection);
        }
        let mut cols = Vec::with_capacity(keep.len());
        for &name in keep {
            let idx = self
                .band_names
                .iter()
                .position(|b| b == name)
                .ok_or_else(|| DatasetError::UnknownBand(name.to_string()))?;
            if cols.contains(&idx) {
                return Err(DatasetError::DuplicateBand(name.to_string()));
            }
            cols.push(idx);
        }
        let n = self.n();
        let c = self.channels();
        let f = self.bands();
        let mut data = Vec::with_capacity(n * c * cols.len());
        for row in 0..n * c {
            for &col in &cols {
                data.push(self.samples.data()[row * f + col]);
            }
        }
        Ok(FeatureDataset {
            samples: Tensor::new(vec![n, c, cols.len()], data),
            labels: self.labels.clone(),
            subject_id: self.subject_id.clone(),
            session_id: self.session_id.clone(),
            band_names: keep.iter().map(|s| s.to_string()).collect(),
            channel_names: self.channel_names.clone(),
            n_classes: self.n_classes,
        })
    }
}

/// Default channel naming: `ch00`, `ch01`, ...
pub fn default_channel_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("ch{i:02}")).collect()
}
