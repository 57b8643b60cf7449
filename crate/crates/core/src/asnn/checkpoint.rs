//! Model checkpoints: a `manifest.json` (config, parameter names, groups,
//! shapes, frozen set) next to one `NDT1` file per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{io, ParamSet, Rng};

use super::config::AsnnConfig;
use super::model::AsnnModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: AsnnConfig,
    pub groups: Vec<String>,
    pub frozen: Vec<String>,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(model: &AsnnModel<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (i, p) in model.params().iter().enumerate() {
        let file = format!("{i:03}_{}.ndt", p.name);
        io::save(&p.tensor, &dir.join(&file))?;
        entries.push(ParamEntry {
            name: p.name.clone(),
            group: p.group.clone(),
            shape: p.tensor.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        format: "schemanet-checkpoint-1".into(),
        config: model.config().clone(),
        groups: model.params().groups(),
        frozen: model.params().frozen().iter().cloned().collect(),
        params: entries,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<AsnnModel<f32>> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    // Parameter values are overwritten below; the seed only fixes the layout.
    let mut model = AsnnModel::<f32>::new(manifest.config.clone(), &mut Rng::new(0))?;
    let mut loaded = ParamSet::<f32>::new();
    for e in &manifest.params {
        let t = io::load::<f32>(&dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Format {
                what: "checkpoint",
                reason: format!(
                    "{} has shape {:?}, manifest says {:?}",
                    e.name,
                    t.shape(),
                    e.shape
                ),
            });
        }
        let name = e
            .name
            .strip_prefix(&format!("{}.", e.group))
            .unwrap_or(&e.name);
        loaded.add(&e.group, name, t);
    }
    model.load_params(&loaded)?;
    for g in &manifest.frozen {
        model.params_mut().freeze(g);
    }
    Ok(model)
}
