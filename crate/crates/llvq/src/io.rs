//! Config files, checkpoints and atomic writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use llvq_core::nn::{ArchSpec, Autoencoder, NnError};
use llvq_core::quantize::{Quantizer, QuantizerKind, QuantizerState};
use llvq_core::real::Real;
use llvq_core::train::{ConfigError, Model, TrainConfig};
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_FORMAT: &str = "llvq-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    ParseConfig {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("serializing config: {0}")]
    WriteConfig(#[from] toml::ser::Error),
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}: not a checkpoint (format `{found}`)", path.display())]
    NotACheckpoint { path: PathBuf, found: String },
    #[error("{}: checkpoint version {found} is not supported (expected {CHECKPOINT_VERSION})", path.display())]
    UnsupportedVersion { path: PathBuf, found: u32 },
    #[error("checkpoint is inconsistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers see either the old file or the complete new one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io_err(&dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn config_from_toml(text: &str, path: &Path) -> Result<TrainConfig, IoError> {
    let cfg: TrainConfig = toml::from_str(text).map_err(|source| IoError::ParseConfig {
        path: path.to_path_buf(),
        source,
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_to_toml(cfg: &TrainConfig) -> Result<String, IoError> {
    Ok(toml::to_string_pretty(cfg)?)
}

pub fn load_config(path: &Path) -> Result<TrainConfig, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    config_from_toml(&text, path)
}

pub fn save_config(path: &Path, cfg: &TrainConfig) -> Result<(), IoError> {
    write_atomic(path, config_to_toml(cfg)?.as_bytes())
}

/// One named network tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

/// Everything needed to rebuild a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: QuantizerKind,
    pub dim: usize,
    /// Target codebook size the model was configured with.
    pub k: u64,
    pub arch: ArchSpec,
    pub network: Vec<NamedTensor>,
    /// Parameters and, for the EMA layer, its running counts and sums.
    pub quantizer: QuantizerState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &Model<T>, k: u64, config: Option<TrainConfig>) -> Self {
        let network = model
            .net
            .params()
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                dims: p.dims.clone(),
                values: p.value.iter().map(|v| v.as_f64()).collect(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: model.quantizer.kind(),
            dim: model.quantizer.dim(),
            k,
            arch: model.net.spec().clone(),
            network,
            quantizer: model.quantizer.clone(),
            config,
        }
    }

    pub fn to_model<T: Real>(&self) -> Result<Model<T>, IoError> {
        if self.kind != self.quantizer.kind() {
            return Err(IoError::Inconsistent(format!(
                "kind tag {:?} but quantizer is {:?}",
                self.kind,
                self.quantizer.kind()
            )));
        }
        if self.dim != self.quantizer.dim() || self.dim != self.arch.latent_dim {
            return Err(IoError::Inconsistent(format!(
                "dim {} vs quantizer {} vs network {}",
                self.dim,
                self.quantizer.dim(),
                self.arch.latent_dim
            )));
        }
        let values: Vec<Vec<f64>> = self.network.iter().map(|t| t.values.clone()).collect();
        let net = Autoencoder::from_values(self.arch.clone(), &values)?;
        for (p, t) in net.params().iter().zip(&self.network) {
            if p.name != t.name || p.dims != t.dims {
                return Err(IoError::Inconsistent(format!("tensor {} does not match {}", t.name, p.name)));
            }
        }
        Ok(Model {
            net,
            quantizer: self.quantizer.clone(),
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), IoError> {
    let bytes = serde_json::to_vec(ckpt).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let json_err = |source| IoError::Json {
        path: path.to_path_buf(),
        source,
    };
    // Check the envelope first so old or foreign files get a clear error.
    #[derive(Deserialize)]
    struct Envelope {
        format: String,
        version: u32,
    }
    let env: Envelope = serde_json::from_slice(&bytes).map_err(json_err)?;
    if env.format != CHECKPOINT_FORMAT {
        return Err(IoError::NotACheckpoint {
            path: path.to_path_buf(),
            found: env.format,
        });
    }
    if env.version != CHECKPOINT_VERSION {
        return Err(IoError::UnsupportedVersion {
            path: path.to_path_buf(),
            found: env.version,
        });
    }
    serde_json::from_slice(&bytes).map_err(json_err)
}
