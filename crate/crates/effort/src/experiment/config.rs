//! JSON experiment configuration. Unknown keys are rejected.

use super::data::{FakeFamily, SplitSizes, SyntheticSpec};
use super::train::{PretrainConfig, Regime, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, BackboneKind};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub residual_ranks: Vec<usize>,
    #[serde(default)]
    pub lora_ranks: Vec<usize>,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: SyntheticSpec,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    pub finetune: TrainConfig,
    #[serde(default = "default_sweep")]
    pub sweep: SweepConfig,
}

fn default_sweep() -> SweepConfig {
    SweepConfig { residual_ranks: vec![1, 2, 4], lora_ranks: vec![], seeds: 5 }
}

impl ExperimentConfig {
    /// The default toy: n = 32, two attention blocks, four tokens per sample.
    pub fn default_toy() -> Self {
        let n = 32;
        ExperimentConfig {
            data: SyntheticSpec {
                n,
                clusters: 16,
                cluster_mean_scale: 6.0,
                noise_sigma: 1.0,
                seq_len: 4,
                quiet_dims: 4,
                quiet_sigma: 0.05,
                token_share: 0.0,
                level: 0.5,
                level_spread: 0.0,
                // gamma = sqrt(1 + kappa^2): full collapse onto the level band
                fakes: FakeFamily { count: 4, gamma: 65f64.sqrt(), perturb_rank: 1, shared_angle: 0.7, level_weight: 8.0 },
                seen_methods: vec![0, 1, 2],
                unseen_methods: vec![3],
                samples: SplitSizes { pretrain: 4000, semantic_eval: 1000, finetune_train: 64, finetune_test: 1000 },
                seed: 0,
            },
            backbone: BackboneConfig { kind: BackboneKind::Attention, n, depth: 2, seq_len: 4, init_scale: 0.3 },
            pretrain: PretrainConfig::default(),
            // 1000 steps on 64 samples; at 2e-4 fft barely leaves its start
            finetune: TrainConfig { lr: 5e-4, ..TrainConfig::new(Regime::Effort, 1, 0) },
            sweep: default_sweep(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.backbone.validate()?;
        self.finetune.validate()?;
        if self.backbone.n != self.data.n {
            return Err(Error::Config(format!("backbone.n = {} but data.n = {}", self.backbone.n, self.data.n)));
        }
        if self.backbone.seq_len != self.data.seq_len {
            return Err(Error::Config(format!("backbone.seq_len = {} but data.seq_len = {}", self.backbone.seq_len, self.data.seq_len)));
        }
        let n = self.data.n;
        if let Some(r) = self.sweep.residual_ranks.iter().chain(&self.sweep.lora_ranks).find(|r| **r < 1 || **r > n) {
            return Err(Error::Config(format!("sweep rank {r} outside 1..={n}")));
        }
        Ok(())
    }
}
