//! Dataset containers, synthetic data generation, and strict JSON config
//! loading.

pub mod dataset;
pub mod synth;

pub use dataset::{load_dataset, save_dataset, Dataset, DatasetMeta};
pub use synth::{gen_synthetic, SynthData, SynthSpec};

use crate::error::Result;

/// Parse a JSON config with unknown keys rejected (the target types all use
/// `deny_unknown_fields`), surfacing serde's key-naming error messages.
pub fn parse_config<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    Ok(serde_json::from_slice(bytes)?)
}
