//! Fourier-adjacency transformer library: a self-contained reverse-mode
//! autodiff engine plus the layers, attention mechanism, model, synthetic
//! EEG data pipeline, and training/evaluation harness built on it.

pub mod attention;
pub mod data;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod reference;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use params::{ParamId, ParamSet};
pub use scalar::Scalar;
pub use tape::{NodeId, NormMode, Tape, TapeError, Targets};
pub use tensor::Tensor;
