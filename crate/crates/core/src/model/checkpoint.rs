//! Versioned JSON checkpoints. Floats are written in shortest round-trip
//! form, so save/load is bit-exact.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ParamStore, SiameseModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "reid-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    backbone: String,
    feature_dim: usize,
    num_classes: usize,
    iteration: usize,
    config: ModelConfig,
    params: ParamStore,
}

pub fn save_checkpoint(model: &SiameseModel, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        backbone: model.backbone().id(),
        feature_dim: model.feature_dim(),
        num_classes: model.num_classes(),
        iteration: model.iteration,
        config: model.config().clone(),
        params: model.params.clone(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

/// Loads a checkpoint, rejecting unknown formats or versions and any
/// parameter whose name or shape disagrees with the declared architecture.
pub fn load_checkpoint(path: &Path) -> Result<SiameseModel> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {} unsupported (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    let mut model = SiameseModel::new(file.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let checks = [
        ("backbone", model.backbone().id(), file.backbone),
        ("feature_dim", model.feature_dim().to_string(), file.feature_dim.to_string()),
        ("num_classes", model.num_classes().to_string(), file.num_classes.to_string()),
    ];
    for (what, expected, found) in checks {
        if expected != found {
            return Err(Error::Checkpoint(format!(
                "{what} mismatch: architecture says {expected}, checkpoint says {found}"
            )));
        }
    }
    let expected: Vec<(String, Vec<usize>)> = model
        .params
        .iter()
        .map(|(n, p)| (n.clone(), p.shape.clone()))
        .collect();
    let found: Vec<(String, Vec<usize>)> = file
        .params
        .iter()
        .map(|(n, p)| (n.clone(), p.shape.clone()))
        .collect();
    if expected != found {
        let diff = expected
            .iter()
            .zip(found.iter().map(Some).chain(std::iter::repeat(None)))
            .find(|(e, f)| Some(*e) != *f)
            .map(|(e, f)| format!("expected {} {:?}, found {:?}", e.0, e.1, f))
            .unwrap_or_else(|| "extra parameters".into());
        return Err(Error::Checkpoint(format!("parameter shape mismatch: {diff}")));
    }
    for (_, p) in file.params.iter() {
        if p.shape.iter().product::<usize>() != p.data.len() {
            return Err(Error::Checkpoint("parameter data length disagrees with shape".into()));
        }
    }
    model.params = file.params;
    model.iteration = file.iteration;
    Ok(model)
}
