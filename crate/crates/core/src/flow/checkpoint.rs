//! Checkpoints: parameters, optimizer moments and JSON metadata in one
//! `.avdt` container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Model, ModelConfig, Placements};
use crate::error::{Error, Result};
use crate::latentio::{Entry, TensorFile};
use crate::numcore::{Optimizer, OptimizerConfig, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub placements: Placements,
    pub optimizer: OptimizerConfig,
    pub step: u64,
    pub config_hash: String,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Model<f32>,
    optimizer: &Optimizer<f32>,
    config_hash: &str,
) -> Result<CheckpointMeta> {
    let meta = CheckpointMeta {
        model: model.cfg.clone(),
        placements: model.cfg.placements(),
        optimizer: optimizer.config().clone(),
        step: optimizer.steps_taken(),
        config_hash: config_hash.to_string(),
    };
    let mut file = model.to_file(&meta)?;
    let (m, v) = optimizer.moments();
    for (i, (_, p)) in model.store.iter().enumerate() {
        if let (Some(mi), Some(vi)) = (m.get(i), v.get(i)) {
            file.insert(format!("optim/m/{}", p.name), Entry::F32(mi.clone()));
            file.insert(format!("optim/v/{}", p.name), Entry::F32(vi.clone()));
        }
    }
    file.write(path)?;
    Ok(meta)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model<f32>, Optimizer<f32>, CheckpointMeta)> {
    let file = TensorFile::read(path)?;
    let meta: CheckpointMeta = file.json("meta")?;
    meta.model.validate()?;
    let model = Model::<f32>::from_file(&meta.model, &file)?;
    let names: Vec<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
    let has_moments = file.get(&format!("optim/m/{}", names[0])).is_some();
    let (m, v) = if has_moments {
        let take = |kind: &str| -> Result<Vec<Tensor<f32>>> {
            names.iter().map(|n| file.f32(&format!("optim/{kind}/{n}")).cloned()).collect()
        };
        (take("m")?, take("v")?)
    } else {
        (Vec::new(), Vec::new())
    };
    if meta.step > 0 && !has_moments && matches!(meta.optimizer, OptimizerConfig::Adam { .. }) {
        return Err(Error::Format("Adam checkpoint without optimizer moments".into()));
    }
    let optimizer = Optimizer::restore(meta.optimizer.clone(), meta.step, m, v)?;
    Ok((model, optimizer, meta))
}
