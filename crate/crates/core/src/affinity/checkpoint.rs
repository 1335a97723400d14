use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{ClassConfig, ObjectClass};
use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpRecord};

use super::model::{ModelConfig, NetId, ShastaModel};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedNetwork {
    pub name: String,
    #[serde(flatten)]
    pub record: MlpRecord,
}

/// Self-describing model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Names of the twelve networks, in storage order.
    pub networks_header: Vec<String>,
    pub class_config: ClassConfig,
    pub model_config: ModelConfig,
    pub networks: Vec<NamedNetwork>,
}

impl Checkpoint {
    pub fn from_model(model: &ShastaModel, class_config: ClassConfig) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            networks_header: NetId::ALL.iter().map(|id| id.name().to_string()).collect(),
            class_config,
            model_config: model.config.clone(),
            networks: NetId::ALL
                .iter()
                .map(|id| NamedNetwork {
                    name: id.name().to_string(),
                    record: MlpRecord::from(model.net(*id)),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<(ShastaModel, ClassConfig)> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {}",
                self.format_version
            )));
        }
        let mut nets = Vec::with_capacity(12);
        for (id, named) in NetId::ALL.iter().zip(self.networks) {
            if named.name != id.name() {
                return Err(Error::Config(format!(
                    "checkpoint network {} where {} was expected",
                    named.name,
                    id.name()
                )));
            }
            nets.push(Mlp::try_from(named.record)?);
        }
        let model = ShastaModel::from_nets(self.model_config, nets)?;
        Ok((model, self.class_config))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)
            .map_err(|e| Error::InvalidInput(format!("checkpoint encoding: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Trained models keyed by class.
#[derive(Debug, Clone, Default)]
pub struct ModelBank {
    models: BTreeMap<ObjectClass, (ShastaModel, ClassConfig)>,
}

impl ModelBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, model: ShastaModel, cfg: ClassConfig) {
        self.models.insert(cfg.class, (model, cfg));
    }

    pub fn get(&self, class: ObjectClass) -> Result<&(ShastaModel, ClassConfig)> {
        self.models
            .get(&class)
            .ok_or_else(|| Error::MissingModel(class.name().to_string()))
    }

    pub fn classes(&self) -> impl Iterator<Item = ObjectClass> + '_ {
        self.models.keys().copied()
    }
}
