//! Dataset directory format.
//!
//! A dataset is a directory of five files:
//! - `manifest.json` — dimensions, names, class count;
//! - `data.bin` — 8-byte magic `FATDATA1`, then row-major `[N, C, F]`
//!   little-endian f32 features;
//! - `labels.bin` — little-endian i32, length `N`;
//! - `subjects.bin` — little-endian i32, length `N`;
//! - `sessions.bin` — little-endian i32, length `N`.
//!
//! # Importing externally licensed features
//!
//! Exports of precomputed differential-entropy features (e.g. from EEG
//! benchmark distributions that cannot be redistributed here) map into this
//! format as follows: arrange the features as one row per trial window with
//! shape `[channels, bands]` in the canonical band order (delta, theta,
//! alpha, beta, gamma), collect integer class labels, subject numbers and
//! session numbers per window, then call [`import_features`] and
//! [`save_dataset`]. No raw EEG is stored; only the derived features.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{synth::GroundTruth, DatasetError, FeatureDataset};
use crate::tensor::Tensor;

pub const DATA_MAGIC: &[u8; 8] = b"FATDATA1";

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{file}: bad magic; not a dataset written by this tool")]
    BadMagic { file: String },
    #[error("manifest does not parse: {0}")]
    BadManifest(String),
    #[error("{file}: has {got} entries, manifest promises {want}")]
    LengthMismatch { file: String, want: usize, got: usize },
    #[error("{file}: negative value {value} cannot index anything")]
    NegativeValue { file: String, value: i32 },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    n_samples: usize,
    n_channels: usize,
    n_bands: usize,
    n_classes: usize,
    band_names: Vec<String>,
    channel_names: Vec<String>,
    subject_ids: Vec<u32>,
}

/// Build a validated dataset from in-memory arrays; the entry point for
/// converters from external feature exports.
pub fn import_features(
    samples: Tensor<f32>,
    labels: Vec<u32>,
    subject_id: Vec<u32>,
    session_id: Vec<u32>,
    band_names: Vec<String>,
    channel_names: Vec<String>,
    n_classes: usize,
) -> Result<FeatureDataset, DatasetError> {
    let ds = FeatureDataset {
        samples,
        labels,
        subject_id,
        session_id,
        band_names,
        channel_names,
        n_classes,
    };
    ds.validate()?;
    Ok(ds)
}

fn write_i32s(path: &Path, values: impl Iterator<Item = i32>) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_i32s(path: &Path, want: usize, file: &str) -> Result<Vec<i32>, IoError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != want * 4 {
        return Err(IoError::LengthMismatch { file: file.into(), want, got: bytes.len() / 4 });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn to_u32s(values: Vec<i32>, file: &str) -> Result<Vec<u32>, IoError> {
    values
        .into_iter()
        .map(|v| {
            if v < 0 {
                Err(IoError::NegativeValue { file: file.into(), value: v })
            } else {
                Ok(v as u32)
            }
        })
        .collect()
}

pub fn save_dataset(ds: &FeatureDataset, dir: &Path) -> Result<(), IoError> {
    ds.validate()?;
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        n_samples: ds.n(),
        n_channels: ds.channels(),
        n_bands: ds.bands(),
        n_classes: ds.n_classes,
        band_names: ds.band_names.clone(),
        channel_names: ds.channel_names.clone(),
        subject_ids: ds.subjects(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join("manifest.json"), json)?;

    let mut w = BufWriter::new(File::create(dir.join("data.bin"))?);
    w.write_all(DATA_MAGIC)?;
    for &v in ds.samples.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;

    write_i32s(&dir.join("labels.bin"), ds.labels.iter().map(|&v| v as i32))?;
    write_i32s(&dir.join("subjects.bin"), ds.subject_id.iter().map(|&v| v as i32))?;
    write_i32s(&dir.join("sessions.bin"), ds.session_id.iter().map(|&v| v as i32))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<FeatureDataset, IoError> {
    let manifest_bytes = std::fs::read(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| IoError::BadManifest(e.to_string()))?;
    let (n, c, f) = (manifest.n_samples, manifest.n_channels, manifest.n_bands);

    let mut r = BufReader::new(File::open(dir.join("data.bin"))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| IoError::BadMagic { file: "data.bin".into() })?;
    if &magic != DATA_MAGIC {
        return Err(IoError::BadMagic { file: "data.bin".into() });
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n * c * f * 4 {
        return Err(IoError::LengthMismatch {
            file: "data.bin".into(),
            want: n * c * f,
            got: bytes.len() / 4,
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()))
        .collect();

    let labels = to_u32s(read_i32s(&dir.join("labels.bin"), n, "labels.bin")?, "labels.bin")?;
    let subject_id = to_u32s(read_i32s(&dir.join("subjects.bin"), n, "subjects.bin")?, "subjects.bin")?;
    let session_id = to_u32s(read_i32s(&dir.join("sessions.bin"), n, "sessions.bin")?, "sessions.bin")?;

    let ds = FeatureDataset {
        samples: Tensor::new(vec![n, c, f], data),
        labels,
        subject_id,
        session_id,
        band_names: manifest.band_names,
        channel_names: manifest.channel_names,
        n_classes: manifest.n_classes,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_ground_truth(truth: &GroundTruth, dir: &Path) -> Result<(), IoError> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_vec_pretty(truth).expect("ground truth serializes");
    std::fs::write(dir.join("ground_truth.json"), json)?;
    Ok(())
}

pub fn load_ground_truth(dir: &Path) -> Result<GroundTruth, IoError> {
    let bytes = std::fs::read(dir.join("ground_truth.json"))?;
    serde_json::from_slice(&bytes).map_err(|e| IoError::BadManifest(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::de::BAND_NAMES;
    use crate::data::default_channel_names;

    fn toy() -> FeatureDataset {
        let n = 6;
        let c = 3;
        let f = 5;
        FeatureDataset {
            samples: Tensor::new(
                vec![n, c, f],
                (0..n * c * f).map(|i| (i as f32).sin()).collect(),
            ),
            labels: vec![0, 1, 2, 0, 1, 2],
            subject_id: vec![0, 0, 0, 1, 1, 1],
            session_id: vec![0, 0, 1, 0, 0, 1],
            band_names: BAND_NAMES.iter().map(|s| s.to_string()).collect(),
            channel_names: default_channel_names(c),
            n_classes: 3,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.labels, ds.labels);
        assert_eq!(loaded.subject_id, ds.subject_id);
        assert_eq!(loaded.session_id, ds.session_id);
        assert_eq!(loaded.band_names, ds.band_names);
        assert_eq!(loaded.channel_names, ds.channel_names);
        assert_eq!(loaded.n_classes, ds.n_classes);
        let a: Vec<u32> = ds.samples.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = loaded.samples.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        save_dataset(&toy(), da.path()).unwrap();
        save_dataset(&toy(), db.path()).unwrap();
        for f in ["manifest.json", "data.bin", "labels.bin", "subjects.bin", "sessions.bin"] {
            let a = std::fs::read(da.path().join(f)).unwrap();
            let b = std::fs::read(db.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs between identical saves");
        }
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy(), dir.path()).unwrap();
        let path = dir.path().join("data.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(IoError::BadMagic { .. })));
    }

    #[test]
    fn manifest_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy(), dir.path()).unwrap();
        // drop one label record
        let labels_path = dir.path().join("labels.bin");
        let bytes = std::fs::read(&labels_path).unwrap();
        std::fs::write(&labels_path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(IoError::LengthMismatch { .. })));

        // truncated data payload
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(&toy(), dir2.path()).unwrap();
        let data_path = dir2.path().join("data.bin");
        let bytes = std::fs::read(&data_path).unwrap();
        std::fs::write(&data_path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_dataset(dir2.path()), Err(IoError::LengthMismatch { .. })));
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = toy();
        save_dataset(&ds, dir.path()).unwrap();
        ds.samples.data_mut()[0] = f32::NAN;
        assert!(save_dataset(&ds, dir.path()).is_err());
        // corrupt on disk: overwrite first payload float with NaN bits
        let path = dir.path().join("data.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn negative_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy(), dir.path()).unwrap();
        let path = dir.path().join("labels.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0..4].copy_from_slice(&(-3i32).to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(IoError::NegativeValue { .. })));
    }

    #[test]
    fn import_validates() {
        let ds = toy();
        let ok = import_features(
            ds.samples.clone(),
            ds.labels.clone(),
            ds.subject_id.clone(),
            ds.session_id.clone(),
            ds.band_names.clone(),
            ds.channel_names.clone(),
            3,
        );
        assert!(ok.is_ok());
        let bad = import_features(
            ds.samples.clone(),
            vec![9; 6], // out-of-range labels
            ds.subject_id.clone(),
            ds.session_id.clone(),
            ds.band_names.clone(),
            ds.channel_names.clone(),
            3,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn ground_truth_round_trip() {
        use crate::data::synth::{generate_synthetic, SyntheticSpec};
        let spec = SyntheticSpec {
            n_subjects: 1,
            trials_per_subject: 3,
            channels: 4,
            coupling_edges: vec![(0, 1), (2, 3)],
            active_edges_per_trial: 2,
            impostors_per_trial: 1,
            seed: 2,
            ..Default::default()
        };
        let (_, _, truth) = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_ground_truth(&truth, dir.path()).unwrap();
        let loaded = load_ground_truth(dir.path()).unwrap();
        assert_eq!(loaded.coupling_edges, truth.coupling_edges);
        assert_eq!(loaded.class_signatures, truth.class_signatures);
        assert_eq!(loaded.spec, truth.spec);
    }
}
