//! Run configuration: one JSON document with a section per pipeline stage,
//! dotted-path overrides and named presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::evaluation::{ProbeConfig, DEFAULT_GRIDS, MAP_SIDE};
use crate::humanmaps::HumanMapConfig;
use crate::model::ModelConfig;
use crate::objective::LossWeights;
use crate::pairs::{ProposalConfig, ProposalSource};
use crate::synthworld::CoocConfig;
use crate::trainer::TrainConfig;

/// Environment variable naming the default data root.
pub const DATA_DIR_VAR: &str = "SECO_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub world: CoocConfig,
    pub train_images: u64,
    pub test_images: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            world: CoocConfig::default(),
            train_images: 2000,
            test_images: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub probe: ProbeConfig,
    /// Flap grid sizes of the priming map.
    pub grids: Vec<usize>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            grids: DEFAULT_GRIDS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    /// Seeds proposals and evaluation, and replaces the world and trainer
    /// seeds in [`RunConfig::resolved`].
    pub seed: u64,
    /// Where every subcommand reads and writes; defaults to `run` under the
    /// data root.
    pub output_dir: Option<PathBuf>,
    pub synthworld: SynthSection,
    pub pairs: ProposalConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub objective: LossWeights,
    pub trainer: TrainConfig,
    pub evaluation: EvaluationSection,
    pub humanmaps: HumanMapConfig,
}


/// Names accepted by [`RunConfig::apply_preset`].
pub const PRESETS: &[&str] = &[
    "SS",
    "GT",
    "RG",
    "SA",
    "NSA",
    "mem",
    "nomem",
    "loss-default",
    "loss-nocov",
    "loss-nomse",
    "loss-novar",
    "loss-mseonly",
    "deterministic",
    "desk",
];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(vec![e.to_string()]))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Output directory, falling back to `$SECO_DATA_DIR/run` (or `data/run`).
    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| {
            std::env::var_os(DATA_DIR_VAR)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("data"))
                .join("run")
        })
    }

    /// The config the pipeline runs with: the global seed pushed into the
    /// sections that carry their own.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.synthworld.world.seed = c.seed;
        c.trainer.seed = c.seed;
        c
    }

    /// Every problem across all sections.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        v.extend(self.synthworld.world.violations());
        if self.synthworld.train_images == 0 {
            v.push("synthworld.train_images must be positive".into());
        }
        v.extend(self.pairs.violations());
        v.extend(self.augment.violations());
        v.extend(self.model.violations());
        v.extend(self.objective.violations());
        v.extend(self.trainer.violations());
        v.extend(self.evaluation.probe.violations());
        if self.evaluation.grids.is_empty() {
            v.push("evaluation.grids must not be empty".into());
        }
        for g in &self.evaluation.grids {
            if *g == 0 || !MAP_SIDE.is_multiple_of(*g) {
                v.push(format!("evaluation.grids: {g} does not divide {MAP_SIDE}"));
            }
        }
        v.extend(self.humanmaps.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    /// Applies `path.to.key=value`. The value is read as JSON when it parses
    /// and as a plain string otherwise. Unknown keys are rejected.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(vec![format!("override {assignment:?} is not key=value")]))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let mut node = &mut doc;
        for key in path.split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(key))
                .ok_or_else(|| Error::InvalidConfig(vec![format!("unknown key {path:?}")]))?;
        }
        *node = value;
        *self = serde_json::from_value(doc)
            .map_err(|e| Error::InvalidConfig(vec![format!("{path}: {e}")]))?;
        Ok(())
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "SS" => self.pairs.source = ProposalSource::SS,
            "GT" => self.pairs.source = ProposalSource::GT,
            "RG" => self.pairs.source = ProposalSource::RG,
            "SA" => self.model.shared_encoder = true,
            "NSA" => self.model.shared_encoder = false,
            "mem" => self.model.use_memory = true,
            "nomem" => self.model.use_memory = false,
            "loss-default" => self.set_weights(25.0, 25.0, 1.0),
            "loss-nocov" => self.set_weights(1.0, 1.0, 0.0),
            "loss-nomse" => self.set_weights(0.0, 25.0, 1.0),
            "loss-novar" => self.set_weights(25.0, 0.0, 1.0),
            "loss-mseonly" => self.set_weights(1.0, 0.0, 0.0),
            "deterministic" => {
                let base = CoocConfig::deterministic();
                self.synthworld.world.p = base.p;
                self.synthworld.world.context_prior = base.context_prior;
            }
            "desk" => self.apply_desk(),
            other => {
                return Err(Error::InvalidConfig(vec![format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )]))
            }
        }
        Ok(())
    }

    fn set_weights(&mut self, alpha: f64, beta: f64, gamma: f64) {
        self.objective.alpha = alpha;
        self.objective.beta = beta;
        self.objective.gamma = gamma;
    }

    /// Small views, a narrow head and clipped updates: the single-core scale
    /// the synthetic-world checks run at.
    fn apply_desk(&mut self) {
        self.augment.context_size = 32;
        self.augment.target_size = 16;
        self.augment.mean = [0.5; 3];
        self.augment.std = [0.5; 3];
        self.model.hidden = 16;
        self.model.slots = 16;
        self.trainer.warmup_epochs = 2;
        self.trainer.grad_clip = Some(1.0);
        self.synthworld.world.render.palette_jitter = 80.0;
    }
}
