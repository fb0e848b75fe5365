//! Parameter checkpoints: a JSON manifest next to a flat little-endian `f64` blob.
//!
//! `<stem>.json` holds the schema version, the block layout, the model
//! hyperparameters and the training RNG state; `<stem>.bin` holds the
//! parameters in layout order, 8 bytes each.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamLayout;

pub const SCHEMA_VERSION: u32 = 1;

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: String,
    pub shapes: ParamLayout,
    pub hyperparams: serde_json::Value,
    pub rng_state: RngState,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn encode_params(params: &[f64]) -> Vec<u8> {
    params.iter().flat_map(|p| p.to_le_bytes()).collect()
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Serde(format!("parameter blob of {} bytes is not a multiple of 8", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect())
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn save(stem: &Path, manifest: &Manifest, params: &[f64]) -> Result<()> {
    if manifest.shapes.total() != params.len() {
        return Err(Error::CountMismatch(format!("layout has {} parameters, got {}", manifest.shapes.total(), params.len())));
    }
    let (json, bin) = paths(stem);
    std::fs::write(json, serde_json::to_string_pretty(manifest)? + "\n")?;
    std::fs::write(bin, encode_params(params))?;
    Ok(())
}

pub fn load(stem: &Path) -> Result<(Manifest, Vec<f64>)> {
    let (json, bin) = paths(stem);
    if !json.exists() || !bin.exists() {
        return Err(Error::MissingArtifact(format!("checkpoint {} (.json + .bin)", stem.display())));
    }
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(json)?)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Serde(format!("unsupported checkpoint schema {}", manifest.schema_version)));
    }
    let params = decode_params(&std::fs::read(bin)?)?;
    if params.len() != manifest.shapes.total() {
        return Err(Error::CountMismatch(format!("manifest declares {} parameters, blob has {}", manifest.shapes.total(), params.len())));
    }
    Ok((manifest, params))
}
