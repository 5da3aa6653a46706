//! `effort` command line: pretrain, fine-tune, sweep, split matrices and analyze features.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure.

use clap::{Args, Parser, Subcommand};
use effort::adapter::{Adapter, EffortAdapter};
use effort::analysis::{asymmetry_trace, effective_rank_tagged, projection_export};
use effort::experiment::data::gen_with_world;
use effort::experiment::report::{summary_json, write_spectrum, write_sweep, write_trace, SWEEP_HEADER, TRACE_HEADER};
use effort::experiment::train::{pretrain_with_world, ASYMMETRY_RATIO};
use effort::experiment::{finetune, rank_sweep, EvalSets, ExperimentConfig, Regime, Split};
use effort::linalg::emx;
use effort::model::ToyModel;
use serde_json::json;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "effort", version, about = "Orthogonal subspace fine-tuning on a synthetic real/fake task")]
struct Cli {
    /// Progress messages on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults to the built-in toy.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing reports in --out.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train a backbone on cluster classification and save the checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a pre-trained checkpoint with one regime.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Output directory of `effort pretrain`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// effort | lora | fft | linear_probe (alias frozen)
        #[arg(long, value_parser = parse_regime)]
        regime: Option<Regime>,
        /// Residual rank for effort, LoRA rank for lora.
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
    },
    /// Rank sweep over effort residual ranks and LoRA ranks, plus fft and linear-probe rows.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Reuse a pre-trained checkpoint instead of pre-training first.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Split a square EMX matrix into principal and residual SVD factors.
    SvdSplit {
        input: PathBuf,
        /// Residual rank n − r.
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Explained-variance spectrum and effective rank of an EMX feature matrix.
    Analyze {
        input: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        /// Also export the top-k principal coordinates.
        #[arg(long)]
        project: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Summarize a sweep CSV per (regime, rank), or a trace CSV as an asymmetry series.
    Report {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    Regime::parse(s).ok_or_else(|| format!("unknown regime '{s}' (effort, lora, fft, linear_probe, frozen)"))
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<effort::Error> for Failure {
    fn from(e: effort::Error) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

struct Ctx {
    verbose: bool,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    match path {
        None => Ok(ExperimentConfig::default_toy()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
        }
    }
}

/// Creates `out` and fails if any of `names` already exists there, unless forced.
fn prepare_out(out: &Path, names: &[&str], force: bool) -> Outcome {
    if !force {
        if let Some(hit) = names.iter().map(|n| out.join(n)).find(|p| p.exists()) {
            return Err(Failure::Usage(format!("{} exists; pass --force to overwrite", hit.display())));
        }
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Outcome {
    std::fs::write(path, serde_json::to_string_pretty(value).expect("json serializes") + "\n")?;
    Ok(())
}

/// Stdout may be a closed pipe (`| head`); that is not an error.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn config_value(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::from_str(&cfg.to_json()).expect("config is json")
}

fn file(path: &Path) -> Result<std::fs::File, Failure> {
    Ok(std::fs::File::create(path)?)
}

fn cmd_pretrain(ctx: &Ctx, common: &Common) -> Outcome {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.data.seed = s;
        cfg.pretrain.seed = s;
    }
    cfg.validate()?;
    prepare_out(&common.out, &["checkpoint", "config.json", "pretrain_losses.csv", "features.emx", "summary.json"], common.force)?;
    let world = cfg.data.world()?;
    ctx.log(format!("pre-training {} clusters, n = {}", cfg.data.clusters, cfg.data.n));
    let (model, report) = pretrain_with_world(&cfg.backbone, &cfg.data, &world, &cfg.pretrain)?;
    let ckpt = common.out.join("checkpoint");
    if ckpt.exists() {
        std::fs::remove_dir_all(&ckpt)?;
    }
    model.save(&ckpt)?;
    std::fs::write(common.out.join("config.json"), cfg.to_json() + "\n")?;

    let mut w = csv::Writer::from_writer(file(&common.out.join("pretrain_losses.csv"))?);
    w.write_record(["iter", "cls_loss"]).map_err(|e| Failure::Runtime(e.to_string()))?;
    for (i, l) in report.losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    w.flush()?;

    let semantic = gen_with_world(&cfg.data, &world, Split::SemanticEval)?;
    let (_, feats) = model.forward(&semantic.x)?;
    emx::save(common.out.join("features.emx"), &feats)?;

    let summary = json!({
        "command": "pretrain",
        "config": config_value(&cfg),
        "iters": report.iters,
        "heldout_accuracy": report.heldout_accuracy,
        "feature_rank": report.feature_rank,
        "trainable_params": model.trainable_count(),
    });
    write_json(&common.out.join("summary.json"), &summary)?;
    emit(&serde_json::to_string_pretty(&summary).expect("json"));
    Ok(())
}

fn load_checkpoint(dir: &Path) -> Result<ToyModel, Failure> {
    let ckpt = dir.join("checkpoint");
    if !ckpt.join("model.json").is_file() {
        return Err(Failure::Runtime(format!("no checkpoint at {}", ckpt.display())));
    }
    ToyModel::load(&ckpt).map_err(|e| Failure::Runtime(format!("{}: {e}", ckpt.display())))
}

/// --config wins; otherwise the config the checkpoint was pre-trained with.
fn checkpoint_config(common: &Common, checkpoint: &Path) -> Result<ExperimentConfig, Failure> {
    if common.config.is_some() {
        return load_config(common.config.as_deref());
    }
    let saved = checkpoint.join("config.json");
    if saved.is_file() {
        load_config(Some(&saved))
    } else {
        Ok(ExperimentConfig::default_toy())
    }
}

fn check_matches(model: &ToyModel, cfg: &ExperimentConfig) -> Outcome {
    if model.cfg != cfg.backbone {
        return Err(Failure::Usage("checkpoint backbone does not match the config's backbone".into()));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_finetune(
    ctx: &Ctx,
    common: &Common,
    checkpoint: &Path,
    regime: Option<Regime>,
    rank: Option<usize>,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
) -> Outcome {
    let mut cfg = checkpoint_config(common, checkpoint)?;
    let ft = &mut cfg.finetune;
    if let Some(r) = regime {
        ft.regime = r;
    }
    if let Some(r) = rank {
        ft.rank = r;
    }
    if let Some(l) = lambda1 {
        ft.lambda1 = l;
    }
    if let Some(l) = lambda2 {
        ft.lambda2 = l;
    }
    if let Some(s) = common.seed {
        ft.seed = s;
    }
    cfg.validate()?;
    let pretrained = load_checkpoint(checkpoint)?;
    check_matches(&pretrained, &cfg)?;
    prepare_out(&common.out, &["trace.csv", "summary.json", "features.emx", "model"], common.force)?;
    let world = cfg.data.world()?;
    let sets = EvalSets::generate(&cfg.data, &world)?;
    ctx.log(format!("fine-tuning: {} rank {} for {} iterations", cfg.finetune.regime.name(), cfg.finetune.rank, cfg.finetune.iters));
    let (model, report) = finetune(&pretrained, &sets, &cfg.finetune)?;
    write_trace(&report.trace, file(&common.out.join("trace.csv"))?)?;
    let (_, feats) = model.forward(&sets.semantic.x)?;
    emx::save(common.out.join("features.emx"), &feats)?;
    let model_dir = common.out.join("model");
    if model_dir.exists() {
        std::fs::remove_dir_all(&model_dir)?;
    }
    model.save(&model_dir)?;

    let mut summary: serde_json::Value = serde_json::from_str(&summary_json(&report)).expect("json");
    summary["command"] = json!("finetune");
    summary["experiment"] = config_value(&cfg);
    write_json(&common.out.join("summary.json"), &summary)?;
    eprintln!("trainable parameters: {}", report.trainable_params);
    emit(&serde_json::to_string_pretty(&summary).expect("json"));
    if let Some(d) = &report.diverged {
        return Err(Failure::Runtime(format!("training diverged: {d}")));
    }
    Ok(())
}

fn cmd_sweep(ctx: &Ctx, common: &Common, checkpoint: Option<&Path>) -> Outcome {
    let mut cfg = match checkpoint {
        Some(c) => checkpoint_config(common, c)?,
        None => load_config(common.config.as_deref())?,
    };
    if let Some(s) = common.seed {
        cfg.finetune.seed = s;
        if checkpoint.is_none() {
            cfg.data.seed = s;
            cfg.pretrain.seed = s;
        }
    }
    cfg.validate()?;
    let world = cfg.data.world()?;
    let loaded = checkpoint.map(load_checkpoint).transpose()?;
    if let Some(m) = &loaded {
        check_matches(m, &cfg)?;
    }
    prepare_out(&common.out, &["sweep.csv", "summary.json"], common.force)?;
    let pretrained = match loaded {
        Some(m) => m,
        None => {
            ctx.log("pre-training the shared backbone");
            pretrain_with_world(&cfg.backbone, &cfg.data, &world, &cfg.pretrain)?.0
        }
    };
    let sets = EvalSets::generate(&cfg.data, &world)?;
    let s = &cfg.sweep;
    ctx.log(format!("sweeping residual ranks {:?}, lora ranks {:?}, {} seeds", s.residual_ranks, s.lora_ranks, s.seeds));
    let rows = rank_sweep(&pretrained, &sets, &cfg.finetune, &s.residual_ranks, &s.lora_ranks, s.seeds);
    write_sweep(&rows, file(&common.out.join("sweep.csv"))?)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    let summary = json!({
        "command": "sweep",
        "config": config_value(&cfg),
        "rows": rows.len(),
        "failed_rows": failed,
        "table": aggregate_rows(&rows),
    });
    write_json(&common.out.join("summary.json"), &summary)?;
    emit(&serde_json::to_string_pretty(&summary).expect("json"));
    Ok(())
}

fn aggregate_rows(rows: &[effort::experiment::SweepRow]) -> serde_json::Value {
    let mut groups: BTreeMap<(String, usize), Vec<&effort::experiment::ExperimentReport>> = BTreeMap::new();
    for r in rows {
        let entry = groups.entry((r.regime.name().to_string(), r.rank)).or_default();
        if let Some(rep) = &r.report {
            entry.push(rep);
        }
    }
    let mean = |v: Vec<f64>| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
    groups
        .into_iter()
        .map(|((regime, rank), reps)| {
            json!({
                "regime": regime,
                "rank": rank,
                "runs": reps.len(),
                "mean_seen_auc": mean(reps.iter().filter_map(|r| r.seen.as_ref().map(|m| m.auc)).collect()),
                "mean_unseen_auc": mean(reps.iter().filter_map(|r| r.unseen.as_ref().map(|m| m.auc)).collect()),
                "mean_rank_after": mean(reps.iter().map(|r| r.rank_after as f64).collect()),
            })
        })
        .collect()
}

fn cmd_svd_split(input: &Path, rank: usize, out: &Path, force: bool) -> Outcome {
    let w = emx::load(input)?;
    let adapter = EffortAdapter::init(&w, rank)?;
    prepare_out(out, &["adapter.json", "summary.json"], force)?;
    let sp = adapter.split().clone();
    Adapter::Effort(adapter).save(out)?;
    let tail: f64 = sp.s_nr.iter().map(|s| s * s).sum();
    let summary = json!({
        "command": "svd-split",
        "input": input.display().to_string(),
        "n": w.rows(),
        "residual_rank": rank,
        "principal_rank": sp.r,
        "singular_values": sp.s_r.iter().chain(&sp.s_nr).collect::<Vec<_>>(),
        "residual_energy": tail,
        "total_energy": sp.frozen_frob_sq,
    });
    write_json(&out.join("summary.json"), &summary)?;
    emit(&serde_json::to_string_pretty(&summary).expect("json"));
    Ok(())
}

fn cmd_analyze(input: &Path, threshold: f64, project: Option<usize>, out: &Path, force: bool) -> Outcome {
    let features = emx::load(input)?;
    let report = effective_rank_tagged(&features, threshold, &input.display().to_string())?;
    let projection = project.map(|k| projection_export(&features, k)).transpose()?;
    prepare_out(out, &["spectrum.csv", "summary.json", "projection.emx"], force)?;
    write_spectrum(&report.spectrum, file(&out.join("spectrum.csv"))?)?;
    if let Some(p) = &projection {
        emx::save(out.join("projection.emx"), p)?;
    }
    let summary = json!({
        "command": "analyze",
        "input": input.display().to_string(),
        "samples": features.rows(),
        "dims": features.cols(),
        "threshold": threshold,
        "effective_rank": report.effective_rank,
        "zero_variance": report.zero_variance,
        "project": project,
    });
    write_json(&out.join("summary.json"), &summary)?;
    emit(&serde_json::to_string_pretty(&summary).expect("json"));
    Ok(())
}

fn csv_failure(e: csv::Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn cmd_report(input: &Path, out: Option<&Path>, force: bool) -> Outcome {
    let mut reader = csv::Reader::from_path(input).map_err(|e| Failure::Runtime(format!("{}: {e}", input.display())))?;
    let header: Vec<String> = reader.headers().map_err(csv_failure)?.iter().map(String::from).collect();
    let records: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>().map_err(csv_failure)?;
    let table = if header == SWEEP_HEADER {
        sweep_table(&records)?
    } else if header == TRACE_HEADER {
        asymmetry_table(&records)?
    } else {
        return Err(Failure::Usage(format!("{}: neither a sweep nor a trace CSV", input.display())));
    };
    if let Some(dir) = out {
        prepare_out(dir, &["report.csv"], force)?;
        std::fs::write(dir.join("report.csv"), &table)?;
    }
    emit(table.trim_end());
    Ok(())
}

fn field(rec: &csv::StringRecord, i: usize) -> Option<f64> {
    rec.get(i).filter(|s| !s.is_empty()).and_then(|s| s.parse().ok())
}

fn to_csv(header: &[&str], rows: Vec<Vec<String>>) -> Result<String, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_failure)?;
    for r in rows {
        w.write_record(&r).map_err(csv_failure)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Failure::Runtime(e.to_string()))?).expect("csv is utf-8"))
}

/// Means per (regime, rank) over the rows that finished.
fn sweep_table(records: &[csv::StringRecord]) -> Result<String, Failure> {
    let col = |name: &str| SWEEP_HEADER.iter().position(|h| *h == name).expect("known column");
    let mut groups: Vec<((String, String), Vec<&csv::StringRecord>)> = Vec::new();
    for rec in records {
        let key = (rec.get(0).unwrap_or_default().to_string(), rec.get(1).unwrap_or_default().to_string());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(rec),
            None => groups.push((key, vec![rec])),
        }
    }
    let metrics = ["trainable_params", "seen_auc", "seen_acc", "unseen_auc", "unseen_acc", "rank_after"];
    let rows = groups
        .into_iter()
        .map(|((regime, rank), recs)| {
            let done: Vec<_> = recs.iter().filter(|r| r.get(col("error")).is_none_or(str::is_empty)).collect();
            let mut row = vec![regime, rank, recs.len().to_string(), (recs.len() - done.len()).to_string()];
            for m in metrics {
                let v: Vec<f64> = done.iter().filter_map(|r| field(r, col(m))).collect();
                row.push(if v.is_empty() { String::new() } else { (v.iter().sum::<f64>() / v.len() as f64).to_string() });
            }
            let collapsed = done.iter().filter(|r| r.get(col("collapse")) == Some("true")).count();
            row.push(collapsed.to_string());
            row
        })
        .collect();
    to_csv(&["regime", "rank", "cells", "failed", "trainable_params", "seen_auc", "seen_acc", "unseen_auc", "unseen_acc", "rank_after", "collapsed"], rows)
}

fn asymmetry_table(records: &[csv::StringRecord]) -> Result<String, Failure> {
    let real: Vec<f64> = records.iter().map(|r| field(r, 3).unwrap_or(f64::NAN)).collect();
    let fake: Vec<f64> = records.iter().map(|r| field(r, 4).unwrap_or(f64::NAN)).collect();
    let trace = asymmetry_trace(&real, &fake, ASYMMETRY_RATIO);
    let rows = trace
        .points
        .iter()
        .map(|p| {
            vec![
                p.iter.to_string(),
                p.real_loss.to_string(),
                p.fake_loss.to_string(),
                p.ratio.to_string(),
                (p.iter >= trace.crossing.unwrap_or(usize::MAX)).to_string(),
            ]
        })
        .collect();
    to_csv(&["iter", "real_loss", "fake_loss", "ratio", "past_crossing"], rows)
}

fn run(cli: Cli) -> Outcome {
    let ctx = Ctx { verbose: cli.verbose };
    match cli.command {
        Command::Pretrain { common } => cmd_pretrain(&ctx, &common),
        Command::Finetune { common, checkpoint, regime, rank, lambda1, lambda2 } => cmd_finetune(&ctx, &common, &checkpoint, regime, rank, lambda1, lambda2),
        Command::Sweep { common, checkpoint } => cmd_sweep(&ctx, &common, checkpoint.as_deref()),
        Command::SvdSplit { input, rank, out, force } => cmd_svd_split(&input, rank, &out, force),
        Command::Analyze { input, threshold, project, out, force } => cmd_analyze(&input, threshold, project, &out, force),
        Command::Report { input, out, force } => cmd_report(&input, out.as_deref(), force),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
