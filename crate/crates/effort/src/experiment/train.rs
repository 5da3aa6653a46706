use super::adam::{adam_step, AdamConfig, AdamState};
use super::data::{gen_with_world, Dataset, Split, SyntheticSpec, World};
use super::metrics::{accuracy_at_half, roc_auc};
use crate::adapter::{AdapterKind, RegularizerWeights};
use crate::analysis::{asymmetry_trace, effective_rank_tagged, logit_line_fit, CollapseThresholds, LogitLineFit, DEFAULT_RANK_THRESHOLD};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{cross_entropy, BackboneConfig, LossParts, ToyModel};
use crate::rng::{self, Rng};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Effort,
    Lora,
    Fft,
    #[serde(alias = "frozen")]
    LinearProbe,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Effort => "effort",
            Regime::Lora => "lora",
            Regime::Fft => "fft",
            Regime::LinearProbe => "linear_probe",
        }
    }

    pub fn parse(s: &str) -> Option<Regime> {
        match s {
            "effort" => Some(Regime::Effort),
            "lora" => Some(Regime::Lora),
            "fft" => Some(Regime::Fft),
            "linear_probe" | "frozen" => Some(Regime::LinearProbe),
            _ => None,
        }
    }

    pub fn adapter_kind(self) -> AdapterKind {
        match self {
            Regime::Effort => AdapterKind::Effort,
            Regime::Lora => AdapterKind::Lora,
            Regime::Fft => AdapterKind::Full,
            Regime::LinearProbe => AdapterKind::Frozen,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default = "one")]
    pub lambda1: f64,
    #[serde(default = "one")]
    pub lambda2: f64,
    pub regime: Regime,
    /// Residual rank n − r for effort, LoRA rank for lora; ignored otherwise.
    #[serde(default = "one_usize")]
    pub rank: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr() -> f64 {
    2e-4
}
fn default_batch() -> usize {
    32
}
fn default_iters() -> usize {
    1000
}
fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}

impl TrainConfig {
    pub fn new(regime: Regime, rank: usize, seed: u64) -> Self {
        TrainConfig { lr: default_lr(), batch: default_batch(), iters: default_iters(), lambda1: 1.0, lambda2: 1.0, regime, rank, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        self.validate_run()
    }

    /// What a training loop can actually run: lr = 0 is allowed here as a no-op step.
    fn validate_run(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch < 1 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        RegularizerWeights::new(self.lambda1, self.lambda2).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn lambdas(&self) -> RegularizerWeights {
        RegularizerWeights { lambda1: self.lambda1, lambda2: self.lambda2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "pre_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "pre_cap")]
    pub max_iters: usize,
    #[serde(default = "pre_target")]
    pub target_accuracy: f64,
    #[serde(default = "pre_check")]
    pub check_every: usize,
    /// Decoupled weight decay on layer weights, applied as w ← w·(1 − lr·wd) after each step.
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

fn pre_lr() -> f64 {
    1e-3
}
fn pre_cap() -> usize {
    5000
}
fn pre_target() -> f64 {
    0.9
}
fn pre_check() -> usize {
    50
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { lr: pre_lr(), batch: 32, max_iters: pre_cap(), target_accuracy: pre_target(), check_every: pre_check(), weight_decay: 0.0, seed: 0 }
    }
}

pub const PRETRAIN_FLOOR: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainReport {
    pub iters: usize,
    pub heldout_accuracy: f64,
    pub feature_rank: usize,
    pub losses: Vec<f64>,
}

/// Per-iteration losses; `real`/`fake` are the class means inside the batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterRecord {
    pub iter: usize,
    pub total: f64,
    pub cls: f64,
    pub real: f64,
    pub fake: f64,
    pub orth: f64,
    pub ksv: f64,
}

impl IterRecord {
    fn from_parts(iter: usize, p: &LossParts) -> Self {
        IterRecord { iter, total: p.total, cls: p.cls, real: p.real, fake: p.fake, orth: p.orth, ksv: p.ksv }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub trace: Vec<IterRecord>,
    /// Set when training stopped early on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

/// Shuffled passes over a dataset, reshuffled at every epoch boundary.
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Batcher {
    pub fn new(len: usize, rng: Rng) -> Self {
        Batcher { order: (0..len).collect(), pos: len, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// The training loop: forward, L_cls + λ1·mean orth + λ2·mean ksv, backward, Adam.
pub fn train(model: &mut ToyModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate_run()?;
    if data.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let names = model.param_names();
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut state = AdamState::new(&shapes);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut batcher = Batcher::new(data.len(), rng::stream(cfg.seed, &[rng::tag("batches")]));
    let lambdas = if cfg.regime == Regime::Effort { cfg.lambdas() } else { RegularizerWeights { lambda1: 0.0, lambda2: 0.0 } };
    let mut trace = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let idx = batcher.next_batch(cfg.batch);
        let (x, y) = data.gather(&idx);
        let (parts, grads) = match model.loss_and_grads(&x, &y, lambdas) {
            Ok(v) => v,
            Err(Error::Numerical(msg)) => return Ok(TrainLog { trace, diverged: Some(format!("iteration {it}: {msg}")) }),
            Err(e) => return Err(e),
        };
        if !parts.total.is_finite() {
            return Ok(TrainLog { trace, diverged: Some(format!("iteration {it}: loss is {}", parts.total)) });
        }
        trace.push(IterRecord::from_parts(it, &parts));
        let mut params = model.params_mut();
        if let Err(Error::Numerical(msg)) = adam_step(&mut params, &grads, &mut state, adam, &names) {
            return Ok(TrainLog { trace, diverged: Some(format!("iteration {it}: {msg}")) });
        }
    }
    Ok(TrainLog { trace, diverged: None })
}

pub fn accuracy_argmax(logits: &Matrix, labels: &[usize]) -> f64 {
    let hits = (0..logits.rows())
        .filter(|&i| {
            let row = logits.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == labels[i]
        })
        .count();
    hits as f64 / logits.rows() as f64
}

/// Pre-trains on K-way cluster classification until held-out accuracy reaches the target.
pub fn pretrain(backbone: &BackboneConfig, spec: &SyntheticSpec, cfg: &PretrainConfig) -> Result<(ToyModel, PretrainReport)> {
    let world = spec.world()?;
    pretrain_with_world(backbone, spec, &world, cfg)
}

pub fn pretrain_with_world(backbone: &BackboneConfig, spec: &SyntheticSpec, world: &World, cfg: &PretrainConfig) -> Result<(ToyModel, PretrainReport)> {
    backbone.validate()?;
    if backbone.n != spec.n || backbone.seq_len != spec.seq_len {
        return Err(Error::Config(format!(
            "backbone (n={}, seq_len={}) does not match data (n={}, seq_len={})",
            backbone.n, backbone.seq_len, spec.n, spec.seq_len
        )));
    }
    let train_set = gen_with_world(spec, world, Split::Pretrain)?;
    let heldout = gen_with_world(spec, world, Split::SemanticEval)?;
    let mut init_rng = rng::stream(cfg.seed, &[rng::tag("pretrain-init")]);
    let mut model = ToyModel::init(backbone, spec.clusters, &mut init_rng)?;
    let names = model.param_names();
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut state = AdamState::new(&shapes);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut batcher = Batcher::new(train_set.len(), rng::stream(cfg.seed, &[rng::tag("pretrain-batches")]));
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    let no_reg = RegularizerWeights { lambda1: 0.0, lambda2: 0.0 };
    let mut losses = Vec::new();
    let mut acc = 0.0;
    let mut iters = 0;
    let check = cfg.check_every.max(1);
    for it in 0..=cfg.max_iters {
        if it % check == 0 || it == cfg.max_iters {
            let (logits, _) = model.forward(&heldout.x)?;
            acc = accuracy_argmax(&logits, &heldout.labels);
            iters = it;
            if acc >= cfg.target_accuracy || it == cfg.max_iters {
                break;
            }
        }
        let idx = batcher.next_batch(cfg.batch);
        let (x, y) = train_set.gather(&idx);
        let (parts, grads) = model.loss_and_grads(&x, &y, no_reg)?;
        losses.push(parts.cls);
        adam_step(&mut model.params_mut(), &grads, &mut state, adam, &names)?;
        if cfg.weight_decay != 0.0 {
            for layer in model.layers.iter_mut() {
                for p in layer.adapter.params_mut() {
                    p.iter_mut().for_each(|w| *w *= decay);
                }
            }
        }
    }
    if acc < PRETRAIN_FLOOR {
        return Err(Error::Pretrain(format!("held-out accuracy {acc:.3} after {iters} iterations is below {PRETRAIN_FLOOR}")));
    }
    let (_, feats) = model.forward(&heldout.x)?;
    let feature_rank = effective_rank_tagged(&feats, DEFAULT_RANK_THRESHOLD, "semantic_eval")?.effective_rank;
    Ok((model, PretrainReport { iters, heldout_accuracy: acc, feature_rank, losses }))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub auc: f64,
    pub accuracy: f64,
}

/// p(fake) = softmax(logits)[1]; AUC on p(fake), accuracy with the ≥ 0.5 rule.
pub fn evaluate(model: &ToyModel, data: &Dataset) -> Result<(EvalMetrics, Matrix)> {
    let (logits, _) = model.forward(&data.x)?;
    let probs: Vec<f64> = (0..logits.rows())
        .map(|i| {
            let (a, b) = (logits[(i, 0)], logits[(i, 1)]);
            1.0 / (1.0 + (a - b).exp())
        })
        .collect();
    let auc = roc_auc(&probs, &data.labels)?;
    let accuracy = accuracy_at_half(&probs, &data.labels)?;
    Ok((EvalMetrics { auc, accuracy }, logits))
}

/// Everything one fine-tuning run produces.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub regime: Regime,
    pub rank: usize,
    pub seed: u64,
    pub config: TrainConfig,
    pub trainable_params: usize,
    pub trace: Vec<IterRecord>,
    pub seen: Option<EvalMetrics>,
    pub unseen: Option<EvalMetrics>,
    pub rank_before: usize,
    pub rank_after: usize,
    pub logit_fit: Option<LogitLineFit>,
    pub collapse: Option<bool>,
    /// First iteration where real/fake loss ratio ≥ 5.
    pub asym_crossing: Option<usize>,
    pub diverged: Option<String>,
}

pub const ASYMMETRY_RATIO: f64 = 5.0;

/// Evaluation data shared by every regime of one experiment.
pub struct EvalSets {
    pub train: Dataset,
    pub seen: Dataset,
    pub unseen: Option<Dataset>,
    pub semantic: Dataset,
}

impl EvalSets {
    pub fn generate(spec: &SyntheticSpec, world: &World) -> Result<EvalSets> {
        Ok(EvalSets {
            train: gen_with_world(spec, world, Split::FinetuneTrain)?,
            seen: gen_with_world(spec, world, Split::FinetuneTestSeen)?,
            unseen: if spec.unseen_methods.is_empty() { None } else { Some(gen_with_world(spec, world, Split::FinetuneTestUnseen)?) },
            semantic: gen_with_world(spec, world, Split::SemanticEval)?,
        })
    }
}

/// Wraps the pre-trained backbone for `cfg.regime`, trains, and evaluates.
pub fn finetune(pretrained: &ToyModel, sets: &EvalSets, cfg: &TrainConfig) -> Result<(ToyModel, ExperimentReport)> {
    cfg.validate()?;
    let mut init_rng = rng::stream(cfg.seed, &[rng::tag("finetune-init")]);
    let mut model = pretrained.adapt(cfg.regime.adapter_kind(), cfg.rank, &mut init_rng)?;
    let rank_of = |m: &ToyModel| -> Result<usize> {
        let (_, f) = m.forward(&sets.semantic.x)?;
        Ok(effective_rank_tagged(&f, DEFAULT_RANK_THRESHOLD, "semantic_eval")?.effective_rank)
    };
    let rank_before = rank_of(&model)?;
    let log = train(&mut model, &sets.train, cfg)?;
    let mut report = ExperimentReport {
        regime: cfg.regime,
        rank: model.layers.first().map(|l| l.adapter.rank()).unwrap_or(0),
        seed: cfg.seed,
        config: cfg.clone(),
        trainable_params: model.trainable_count(),
        trace: log.trace,
        seen: None,
        unseen: None,
        rank_before,
        rank_after: rank_before,
        logit_fit: None,
        collapse: None,
        asym_crossing: None,
        diverged: log.diverged,
    };
    let real: Vec<f64> = report.trace.iter().map(|r| r.real).collect();
    let fake: Vec<f64> = report.trace.iter().map(|r| r.fake).collect();
    report.asym_crossing = asymmetry_trace(&real, &fake, ASYMMETRY_RATIO).crossing;
    if report.diverged.is_some() {
        return Ok((model, report));
    }
    let (seen, logits) = evaluate(&model, &sets.seen)?;
    report.seen = Some(seen);
    if let Some(u) = &sets.unseen {
        report.unseen = Some(evaluate(&model, u)?.0);
    }
    let fit = logit_line_fit(&logits)?;
    report.collapse = Some(fit.collapsed(CollapseThresholds::default()));
    report.logit_fit = Some(fit);
    report.rank_after = rank_of(&model)?;
    Ok((model, report))
}

/// Mean cross-entropy of a model on a whole dataset (used by reports and tests).
pub fn dataset_loss(model: &ToyModel, data: &Dataset) -> Result<f64> {
    let (logits, _) = model.forward(&data.x)?;
    Ok(cross_entropy(&logits, &data.labels)?.mean)
}
