//! Single-file checkpoints: 8-byte magic, `u64` little-endian header length,
//! JSON header, then the flat parameter vector as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, ConvNet, Normalization};
use crate::error::{Error, Result};
use crate::io::{read_f64le, sha256_hex, write_f64le};

const MAGIC: &[u8; 8] = b"H4DVNET\0";
const FORMAT: &str = "hybrid4dvar-checkpoint/1";

/// How a set of weights came to be.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Provenance {
    pub method: String,
    pub init_seed: u64,
    pub train_seed: u64,
    pub dataset_digest: Option<String>,
    pub targets_digest: Option<String>,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_rmse: Option<f64>,
    pub n_model_integrations: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: ConvNet,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    dtype: String,
    layout: String,
    n_params: usize,
    architecture: Architecture,
    normalization: Normalization,
    provenance: Provenance,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: FORMAT.into(),
            dtype: "f64le".into(),
            layout: "conv[l].weight[out][in][3][3], conv[l].bias[out] for each layer; dense.weight[n_space][channel*time*space], dense.bias[n_space]".into(),
            n_params: self.net.params.len(),
            architecture: self.net.arch.clone(),
            normalization: self.net.norm,
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.net.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&write_f64le(&self.net.params));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::malformed(origin, reason);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.format != FORMAT {
            return Err(bad("unsupported checkpoint format"));
        }
        header.architecture.validate()?;
        let params = read_f64le(&bytes[16 + len..]).ok_or_else(|| bad("weight blob is not a whole number of f64"))?;
        if params.len() != header.n_params || params.len() != header.architecture.n_params() {
            return Err(bad("weight count does not match the architecture"));
        }
        Ok(Self {
            net: ConvNet {
                arch: header.architecture,
                norm: header.normalization,
                params,
            },
            provenance: header.provenance,
        })
    }
}

/// Writes the checkpoint and returns the SHA-256 of the file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<String> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let bytes = ckpt.to_bytes()?;
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    Checkpoint::from_bytes(&bytes, path)
}
