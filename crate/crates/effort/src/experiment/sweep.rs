use super::data::SyntheticSpec;
use super::train::{finetune, pretrain_with_world, EvalSets, ExperimentReport, PretrainConfig, PretrainReport, Regime, TrainConfig};
use crate::error::Result;
use crate::model::{BackboneConfig, ToyModel};
use crate::rng;
use serde::Serialize;

/// One fine-tuning cell of a sweep.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub regime: Regime,
    pub rank: usize,
    pub seed_index: usize,
    pub seed: u64,
    pub report: Option<ExperimentReport>,
    pub error: Option<String>,
}

/// Seed of one cell, independent of the order cells run in.
pub fn cell_seed(base_seed: u64, regime: Regime, rank: usize, seed_index: usize) -> u64 {
    rng::derive(base_seed, &[rng::tag(regime.name()), rank as u64, seed_index as u64])
}

/// The cells a sweep runs, in table order: per seed, effort ranks, lora ranks, fft, linear probe.
pub fn sweep_cells(residual_ranks: &[usize], lora_ranks: &[usize], seeds: usize) -> Vec<(Regime, usize, usize)> {
    let mut cells = Vec::new();
    for si in 0..seeds {
        cells.extend(residual_ranks.iter().map(|&r| (Regime::Effort, r, si)));
        cells.extend(lora_ranks.iter().map(|&r| (Regime::Lora, r, si)));
        cells.push((Regime::Fft, 0, si));
        cells.push((Regime::LinearProbe, 0, si));
    }
    cells
}

/// Fine-tunes every cell from one pre-trained backbone. Failing cells are recorded, not fatal.
pub fn rank_sweep(pretrained: &ToyModel, sets: &EvalSets, base: &TrainConfig, residual_ranks: &[usize], lora_ranks: &[usize], seeds: usize) -> Vec<SweepRow> {
    sweep_cells(residual_ranks, lora_ranks, seeds)
        .into_iter()
        .map(|(regime, rank, si)| {
            let seed = cell_seed(base.seed, regime, rank, si);
            let cfg = TrainConfig { regime, rank, seed, ..base.clone() };
            match finetune(pretrained, sets, &cfg) {
                Ok((_, report)) => SweepRow { regime, rank, seed_index: si, seed, report: Some(report), error: None },
                Err(e) => SweepRow { regime, rank, seed_index: si, seed, report: None, error: Some(e.to_string()) },
            }
        })
        .collect()
}

/// A labelled fine-tuning variant for `seed_protocol`.
#[derive(Clone, Debug)]
pub struct Variant {
    pub label: String,
    pub cfg: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub pretrain: PretrainReport,
    pub runs: Vec<(String, ExperimentReport)>,
}

impl SeedOutcome {
    pub fn get(&self, label: &str) -> Option<&ExperimentReport> {
        self.runs.iter().find(|(l, _)| l == label).map(|(_, r)| r)
    }
}

/// Fresh world and pre-training for `seed`, then every variant fine-tuned from the same backbone.
pub fn seed_protocol(spec: &SyntheticSpec, backbone: &BackboneConfig, pre: &PretrainConfig, variants: &[Variant], seed: u64) -> Result<SeedOutcome> {
    let spec = SyntheticSpec { seed: rng::derive(seed, &[rng::tag("world-seed")]), ..spec.clone() };
    let pre = PretrainConfig { seed: rng::derive(seed, &[rng::tag("pretrain-seed")]), ..pre.clone() };
    let world = spec.world()?;
    let (model, pretrain) = pretrain_with_world(backbone, &spec, &world, &pre)?;
    let sets = EvalSets::generate(&spec, &world)?;
    let mut runs = Vec::with_capacity(variants.len());
    for v in variants {
        let cfg = TrainConfig { seed: rng::derive(seed, &[rng::tag(&v.label)]), ..v.cfg.clone() };
        let (_, report) = finetune(&model, &sets, &cfg)?;
        runs.push((v.label.clone(), report));
    }
    Ok(SeedOutcome { seed, pretrain, runs })
}
