//! Checkpoint persistence: model parameters in safetensors plus a JSON
//! sidecar carrying the run configuration and the frozen mask basis, so a
//! checkpoint is self-describing and inference never refits the basis.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mask_codec::PcaBasis;
use crate::model::Model;
use crate::nn::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub config: RunConfig,
    pub basis: PcaBasis,
    pub iteration: usize,
}

/// `x.safetensors` -> `x.meta.json`.
pub fn sidecar_path(params: &Path) -> PathBuf {
    params.with_extension("meta.json")
}

pub fn save_checkpoint(
    params_path: &Path,
    ps: &ParamStore,
    cfg: &RunConfig,
    basis: &PcaBasis,
    iteration: usize,
) -> Result<()> {
    if let Some(dir) = params_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    ps.save(params_path)?;
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        basis: basis.clone(),
        iteration,
    };
    std::fs::write(sidecar_path(params_path), serde_json::to_string(&meta)?)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub ps: ParamStore,
    pub model: Model,
    pub meta: CheckpointMeta,
}

/// Rebuild the model from a checkpoint. Errors on version mismatch and on
/// any parameter missing from or shaped differently than the file.
pub fn load_checkpoint(params_path: &Path) -> Result<LoadedCheckpoint> {
    let meta_path = sidecar_path(params_path);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| {
        Error::Checkpoint(format!("cannot read {}: {e}", meta_path.display()))
    })?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", meta_path.display())))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            meta.version
        )));
    }
    meta.config.validate()?;
    let mut ps = ParamStore::with_preloaded(meta.config.seed, params_path)?;
    let model = Model::new(&mut ps, &meta.config, meta.basis.clone())?;
    Ok(LoadedCheckpoint { ps, model, meta })
}
