//! Run configuration: one TOML file covering data paths, graph construction,
//! model shape, loss weights, and trainer settings.

use dream_core::error::{DreamError, Result};
use dream_core::model::{BehaviorLineConfig, GateInput, ModalLineConfig, ModelConfig};
use dream_core::objectives::LossWeights;
use dream_core::params::AdamConfig;
use dream_core::train::TrainerConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub graph: GraphSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub interactions: PathBuf,
    /// Stem of `<stem>.f32` + `<stem>.json` (or `<stem>.csv`).
    pub vision_features: Option<PathBuf>,
    pub text_features: Option<PathBuf>,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_kcore")]
    pub kcore: usize,
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from(".dream-cache")
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_kcore() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    pub k: usize,
    pub self_loop: bool,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection {
            k: 10,
            self_loop: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embedding_dim: usize,
    pub behavior_layers: usize,
    pub modal_layers: usize,
    pub vision_weight: f32,
    pub gate_input: GateInput,
    pub detach_gate_behavior: bool,
    pub normalize_alignment: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embedding_dim: 64,
            behavior_layers: 2,
            modal_layers: 1,
            vision_weight: 0.3,
            gate_input: GateInput::Base,
            detach_gate_behavior: false,
            normalize_alignment: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub intra: f32,
    pub inter: f32,
    pub s3: f32,
    pub l2: f32,
    pub temperature: f32,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            intra: 0.01,
            inter: 0.01,
            s3: 0.1,
            l2: 1e-4,
            temperature: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_ks: Vec<usize>,
    pub seed: u64,
    pub drift_sample: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 2048,
            learning_rate: 0.001,
            max_epochs: 1000,
            patience: 20,
            eval_ks: vec![10, 20],
            seed: 42,
            drift_sample: 512,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| DreamError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let missing = |what: String| {
            DreamError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                what,
            ))
        };
        if !self.data.interactions.exists() {
            return Err(missing(format!(
                "interactions file {} does not exist",
                self.data.interactions.display()
            )));
        }
        for stem in [&self.data.vision_features, &self.data.text_features]
            .into_iter()
            .flatten()
        {
            let ok = stem.with_extension("f32").exists() || stem.with_extension("csv").exists();
            if !ok {
                return Err(missing(format!(
                    "feature files {}.f32/.csv do not exist",
                    stem.display()
                )));
            }
        }
        Ok(())
    }

    pub fn has_modal(&self) -> bool {
        self.data.vision_features.is_some() || self.data.text_features.is_some()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            behavior: BehaviorLineConfig {
                layers: self.model.behavior_layers,
                dim: self.model.embedding_dim,
            },
            modal: ModalLineConfig {
                enabled: self.has_modal(),
                modal_layers: self.model.modal_layers,
                vision_weight: self.model.vision_weight,
                k: self.graph.k,
                use_vision: self.data.vision_features.is_some(),
                use_text: self.data.text_features.is_some(),
                use_filter_gate: true,
                use_item_graph: true,
                use_user_graph: true,
                gate_input: self.model.gate_input,
                detach_gate_behavior: self.model.detach_gate_behavior,
                self_loop: self.graph.self_loop,
            },
            normalize_alignment: self.model.normalize_alignment,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.loss.intra,
            beta: self.loss.inter,
            gamma: self.loss.s3,
            lambda: self.loss.l2,
            tau: self.loss.temperature,
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            batch_size: self.train.batch_size,
            adam: AdamConfig {
                lr: self.train.learning_rate,
                ..Default::default()
            },
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            eval_ks: self.train.eval_ks.clone(),
            seed: self.train.seed,
            weights: self.loss_weights(),
            model: self.model_config(),
            drift_sample: self.train.drift_sample,
        }
    }

    /// Serialize the resolved config into the output directory; the echoed
    /// file parses back to an identical RunConfig.
    pub fn write_echo(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| DreamError::Internal(format!("config echo: {e}")))?;
        std::fs::write(out_dir.join("config_echo.toml"), text)?;
        Ok(())
    }
}
