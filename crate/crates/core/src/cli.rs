//! The `shortcut` command-line tool.
//!
//! Exit codes: 0 success, 2 usage error, 3 data-format error, 4 divergence,
//! 1 anything else.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::exitsim::{run_early_exit, ExitError, ExitPolicy, ExitSource};
use crate::fit::{fit_shortcut, FitConfig, FitError, FitReport};
use crate::head::{head_file_name, HeadError, HeadSet, ShortcutHead, Variant};
use crate::hsdata::{load_dataset, HiddenPairDataset, HsDataError, SplitPart};
use crate::io::write_atomic;
use crate::metrics::{
    all_pairs, build_jump_grid, precision, surprisal, to_final, JumpEvalGrid, Metric, MetricError,
    Unembedder,
};
use crate::toylm::{
    bundled_corpus, dump_activations, split_corpus, train_toylm, ToyError, ToyLM, ToyLMConfig,
    TrainOptions, TOY_POSITIONS_PER_SENTENCE,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

pub const TOY_WEIGHTS_FILE: &str = "toylm.weights";

/// Bad flag values detected after parsing.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(
    name = "shortcut",
    version,
    about = "Fit and evaluate shortcut heads between transformer blocks"
)]
pub struct Cli {
    /// Worker threads for independent jobs (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build (and optionally train) the toy model and write an activation dump.
    ToyDump(ToyDumpArgs),
    /// Fit one shortcut head.
    Fit(FitArgs),
    /// Evaluate a metric over a grid of block jumps.
    Grid(GridArgs),
    /// Replay confidence-threshold early exit on a dump.
    Simulate(SimulateArgs),
    /// Per-variant curves to the final block plus a depth comparison.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

impl From<SplitArg> for SplitPart {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitPart::Train,
            SplitArg::Val => SplitPart::Val,
            SplitArg::All => SplitPart::All,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CellsArg {
    /// Every (l, m) with l < m.
    All,
    /// Every (l, final).
    Final,
}

#[derive(Debug, Args)]
pub struct ToyDumpArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Model profile: default (H=128) or wide (H=256).
    #[arg(long, default_value = "default")]
    pub profile: String,
    /// Training steps before dumping (0 keeps the random init).
    #[arg(long, default_value_t = TrainOptions::default().steps)]
    pub train_steps: usize,
    #[arg(long, default_value_t = TrainOptions::default().learning_rate)]
    pub lr: f32,
    /// Sequences per training step.
    #[arg(long, default_value_t = TrainOptions::default().batch_size)]
    pub batch_size: usize,
    /// Seed for weight init and training order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed for token-position sampling and the train/val split.
    #[arg(long, default_value_t = 0)]
    pub sample_seed: u64,
    #[arg(long, default_value_t = TOY_POSITIONS_PER_SENTENCE)]
    pub positions_per_sentence: usize,
}

#[derive(Debug, Args)]
pub struct FitConfigArgs {
    /// Fit config file with `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one fit config key, e.g. `--set lr=0.01` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl FitConfigArgs {
    fn resolve(&self) -> anyhow::Result<FitConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                FitConfig::from_kv_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
            }
            None => FitConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| usage(e.to_string()))?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub from: usize,
    #[arg(long)]
    pub to: usize,
    /// id, jtc, njtc or nnjtc.
    #[arg(long)]
    pub variant: String,
    /// Directory receiving the .head file and its report.
    #[arg(long, default_value = "heads")]
    pub out: PathBuf,
    #[command(flatten)]
    pub fit: FitConfigArgs,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated variants or `all`.
    #[arg(long, default_value = "all")]
    pub variant: String,
    /// Comma-separated metrics: r2, precision, surprisal.
    #[arg(long, default_value = "r2")]
    pub metric: String,
    /// Directory holding .head files (not needed for id).
    #[arg(long)]
    pub heads: Option<PathBuf>,
    /// Cells for r2; precision and surprisal always use (l, final).
    #[arg(long, value_enum, default_value_t = CellsArg::All)]
    pub cells: CellsArg,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    #[arg(long, default_value = "grids")]
    pub out: PathBuf,
    /// Fit and save heads for missing cells instead of failing.
    #[arg(long)]
    pub fit_missing: bool,
    /// Decode without the final normalization.
    #[arg(long)]
    pub no_final_norm: bool,
    #[command(flatten)]
    pub fit: FitConfigArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "nnjtc")]
    pub variant: String,
    #[arg(long)]
    pub heads: Option<PathBuf>,
    /// Confidence threshold(s) in (0, 1], comma-separated for a sweep.
    #[arg(long, default_value = "0.9")]
    pub lambda: String,
    /// Comma-separated blocks that may exit, or `all`.
    #[arg(long, default_value = "all")]
    pub eligible: String,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    #[arg(long, default_value = "traces")]
    pub out: PathBuf,
    #[arg(long)]
    pub fit_missing: bool,
    #[arg(long)]
    pub no_final_norm: bool,
    #[command(flatten)]
    pub fit: FitConfigArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub heads: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
    #[arg(long)]
    pub fit_missing: bool,
    #[arg(long)]
    pub no_final_norm: bool,
    #[command(flatten)]
    pub fit: FitConfigArgs,
}

/// Written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub dataset: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<String>,
    pub tool_version: String,
    pub wall_time_secs: f64,
}

impl RunManifest {
    fn new(command: &str, dataset: Option<&Path>) -> Self {
        Self {
            command: command.to_string(),
            config: serde_json::Value::Null,
            dataset: dataset.map(|p| p.display().to_string()),
            seeds: BTreeMap::new(),
            artifacts: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_secs: 0.0,
        }
    }

    fn write(mut self, dir: &Path, started: Instant) -> anyhow::Result<()> {
        self.wall_time_secs = started.elapsed().as_secs_f64();
        let path = dir.join(format!("run_{}.json", self.command.replace('-', "_")));
        write_json(&path, &self)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main_exit_code() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code_for(&e)
        }
    }
}

/// Maps an error to the documented exit code.
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(code) = cause
            .downcast_ref::<FitError>()
            .map(fit_code)
            .or_else(|| cause.downcast_ref::<HeadError>().map(head_code))
            .or_else(|| cause.downcast_ref::<HsDataError>().map(|_| EXIT_DATA))
            .or_else(|| cause.downcast_ref::<MetricError>().map(metric_code))
            .or_else(|| cause.downcast_ref::<ToyError>().map(toy_code))
            .or_else(|| cause.downcast_ref::<ExitError>().map(exit_error_code))
        {
            return code;
        }
    }
    EXIT_OTHER
}

fn fit_code(e: &FitError) -> i32 {
    match e {
        FitError::Diverged { .. } => EXIT_DIVERGED,
        FitError::Config(_) | FitError::NotTrainable(_) => EXIT_USAGE,
        FitError::Head(h) => head_code(h),
        FitError::Data(_) | FitError::Shape(_) | FitError::NonFinite(_) => EXIT_DATA,
        FitError::RankDeficient => EXIT_OTHER,
    }
}

fn head_code(e: &HeadError) -> i32 {
    match e {
        HeadError::InvalidBlocks { .. } | HeadError::InvalidRank { .. } => EXIT_USAGE,
        HeadError::Corrupt(_)
        | HeadError::Truncated { .. }
        | HeadError::MissingHeads { .. }
        | HeadError::WidthMismatch { .. }
        | HeadError::Shape(_)
        | HeadError::NonFinite(_) => EXIT_DATA,
        _ => EXIT_OTHER,
    }
}

fn metric_code(e: &MetricError) -> i32 {
    match e {
        MetricError::InvalidCell { .. } | MetricError::NotFinalBlock { .. } => EXIT_USAGE,
        MetricError::Head(h) => head_code(h),
        _ => EXIT_DATA,
    }
}

fn toy_code(e: &ToyError) -> i32 {
    match e {
        ToyError::Diverged(_) => EXIT_DIVERGED,
        ToyError::Config(_) => EXIT_USAGE,
        ToyError::Io { .. } => EXIT_OTHER,
        _ => EXIT_DATA,
    }
}

fn exit_error_code(e: &ExitError) -> i32 {
    match e {
        ExitError::InvalidLambda(_) | ExitError::NotIncreasing | ExitError::InvalidBlock { .. } => {
            EXIT_USAGE
        }
        ExitError::MissingHeads { .. } | ExitError::Empty => EXIT_DATA,
        ExitError::Metric(m) => metric_code(m),
        ExitError::Head(h) => head_code(h),
        ExitError::Toy(t) => toy_code(t),
        ExitError::Io(_) => EXIT_OTHER,
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.jobs > 0 {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global();
    }
    match cli.command {
        Command::ToyDump(a) => cmd_toy_dump(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Grid(a) => cmd_grid(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn parse_variants(s: &str) -> anyhow::Result<Vec<Variant>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(Variant::ALL.to_vec());
    }
    s.split(',')
        .map(|v| v.trim().parse::<Variant>().map_err(usage))
        .collect()
}

fn parse_variant(s: &str) -> anyhow::Result<Variant> {
    s.parse::<Variant>().map_err(usage)
}

fn parse_metrics(s: &str) -> anyhow::Result<Vec<Metric>> {
    s.split(',')
        .map(|m| m.trim().parse::<Metric>().map_err(usage))
        .collect()
}

fn open_dataset(path: &Path) -> anyhow::Result<HiddenPairDataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn cmd_toy_dump(a: &ToyDumpArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut config = ToyLMConfig::profile(&a.profile).ok_or_else(|| {
        usage(format!(
            "unknown profile {:?} (expected default or wide)",
            a.profile
        ))
    })?;
    config.seed = a.seed;
    if a.positions_per_sentence == 0 {
        return Err(usage("--positions-per-sentence must be positive"));
    }
    let corpus = bundled_corpus(config.max_seq_len);
    let (train, held_out) = split_corpus(&corpus);
    let init = ToyLM::init(config.clone())?;
    let opts = TrainOptions {
        steps: a.train_steps,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        ..TrainOptions::default()
    };
    let held_before = init.mean_cross_entropy(&held_out)?;
    let (model, stats) = train_toylm(&init, &train, &opts)?;
    let held_after = model.mean_cross_entropy(&held_out)?;
    eprintln!(
        "toy model: {} params, {} train steps, held-out cross-entropy {:.4} -> {:.4}",
        model.param_count(),
        stats.steps,
        held_before,
        held_after
    );

    let model_name = format!("toylm-{}-steps{}-seed{}", a.profile, a.train_steps, a.seed);
    let manifest = dump_activations(
        &model,
        &corpus,
        a.positions_per_sentence,
        a.sample_seed,
        &model_name,
        &a.out,
    )?;
    let weights = a.out.join(TOY_WEIGHTS_FILE);
    model.save(&weights)?;

    let mut run = RunManifest::new("toy-dump", Some(&a.out));
    run.config = serde_json::json!({
        "model": config,
        "training": opts,
        "positions_per_sentence": a.positions_per_sentence,
        "num_sentences": corpus.len(),
        "held_out_cross_entropy_before": held_before,
        "held_out_cross_entropy_after": held_after,
        "final_train_loss": stats.loss_trace.last(),
    });
    run.seeds.insert("model".into(), a.seed);
    run.seeds.insert("sample".into(), a.sample_seed);
    run.artifacts.push(a.out.display().to_string());
    run.artifacts.push(weights.display().to_string());
    run.write(&a.out, started)?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(())
}

fn save_fitted(dir: &Path, head: &ShortcutHead, report: &FitReport) -> anyhow::Result<Vec<String>> {
    let name = head_file_name(report.variant, report.from_block, report.to_block);
    let head_path = dir.join(&name);
    head.save(&head_path)?;
    let report_path = dir.join(format!("{}.report.json", name.trim_end_matches(".head")));
    write_json(&report_path, report)?;
    Ok(vec![
        head_path.display().to_string(),
        report_path.display().to_string(),
    ])
}

fn cmd_fit(a: &FitArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let variant = parse_variant(&a.variant)?;
    if a.from >= a.to {
        return Err(usage(format!(
            "--from {} must be smaller than --to {}",
            a.from, a.to
        )));
    }
    let cfg = a.fit.resolve()?;
    let ds = open_dataset(&a.data)?;
    if a.to > ds.num_blocks() {
        return Err(usage(format!(
            "--to {} exceeds num_blocks {}",
            a.to,
            ds.num_blocks()
        )));
    }
    let (head, report) = fit_shortcut(&ds, a.from, a.to, variant, &cfg)?;
    create_dir(&a.out)?;
    let artifacts = save_fitted(&a.out, &head, &report)?;
    eprintln!(
        "{} {}->{}: rank {}, {} params, train loss {:.6}, val loss {}",
        variant,
        a.from,
        a.to,
        report.rank,
        report.num_params,
        report.final_train_loss,
        report
            .final_val_loss
            .map_or("n/a".to_string(), |v| format!("{v:.6}"))
    );
    let mut run = RunManifest::new("fit", Some(&a.data));
    run.config = serde_json::to_value(&cfg)?;
    run.seeds.insert("fit".into(), cfg.seed);
    run.artifacts = artifacts;
    run.write(&a.out, started)
}

/// Loads the heads for `cells`, fitting and saving the missing ones when
/// `fit` is given. Without it, every missing cell is reported at once.
pub fn obtain_heads(
    ds: &HiddenPairDataset,
    variant: Variant,
    cells: &[(usize, usize)],
    dir: Option<&Path>,
    fit: Option<&FitConfig>,
) -> anyhow::Result<(HeadSet, Vec<String>)> {
    let mut set = HeadSet::new(variant, ds.hidden_dim());
    let mut artifacts = Vec::new();
    if variant == Variant::Identity {
        return Ok((set, artifacts));
    }
    let mut missing = Vec::new();
    for &(l, m) in cells {
        match dir.map(|d| d.join(head_file_name(variant, l, m))) {
            Some(p) if p.is_file() => {
                let head = ShortcutHead::load(&p)?;
                if (head.from_block, head.to_block) != (l, m) || head.variant() != variant {
                    return Err(HeadError::Corrupt(format!(
                        "{} does not hold a {variant} {l}->{m} head",
                        p.display()
                    ))
                    .into());
                }
                set.insert(head)?;
            }
            _ => missing.push((l, m)),
        }
    }
    if missing.is_empty() {
        return Ok((set, artifacts));
    }
    let (Some(cfg), Some(dir)) = (fit, dir) else {
        return Err(HeadError::MissingHeads {
            variant,
            cells: missing,
        }
        .into());
    };
    create_dir(dir)?;
    let fitted: Vec<_> = missing
        .par_iter()
        .map(|&(l, m)| fit_shortcut(ds, l, m, variant, cfg))
        .collect();
    for result in fitted {
        let (head, report) = result?;
        artifacts.extend(save_fitted(dir, &head, &report)?);
        set.insert(head)?;
    }
    Ok((set, artifacts))
}

fn fit_for(
    args: &FitConfigArgs,
    enabled: bool,
    heads: Option<&Path>,
) -> anyhow::Result<Option<FitConfig>> {
    if !enabled {
        return Ok(None);
    }
    if heads.is_none() {
        return Err(usage(
            "--fit-missing needs --heads to store the fitted heads",
        ));
    }
    Ok(Some(args.resolve()?))
}

fn unembedder_for(ds: &HiddenPairDataset, no_final_norm: bool) -> anyhow::Result<Unembedder> {
    Ok(Unembedder::from_dataset(ds, !no_final_norm)?)
}

fn cmd_grid(a: &GridArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let variants = parse_variants(&a.variant)?;
    let metrics = parse_metrics(&a.metric)?;
    let fit = fit_for(&a.fit, a.fit_missing, a.heads.as_deref())?;
    let ds = open_dataset(&a.data)?;
    let nb = ds.num_blocks();
    let part = SplitPart::from(a.split);
    let needs_decoder = metrics.iter().any(|m| m.needs_final_block());
    let unembedder = if needs_decoder {
        Some(unembedder_for(&ds, a.no_final_norm)?)
    } else {
        None
    };
    create_dir(&a.out)?;
    let mut run = RunManifest::new("grid", Some(&a.data));
    for &variant in &variants {
        let metric_cells: Vec<(Metric, Vec<(usize, usize)>)> = metrics
            .iter()
            .map(|&m| {
                let cells = if m.needs_final_block() || matches!(a.cells, CellsArg::Final) {
                    to_final(nb)
                } else {
                    all_pairs(nb)
                };
                (m, cells)
            })
            .collect();
        let mut union: Vec<(usize, usize)> =
            metric_cells.iter().flat_map(|(_, c)| c.clone()).collect();
        union.sort_unstable();
        union.dedup();
        let (heads, fitted) = obtain_heads(&ds, variant, &union, a.heads.as_deref(), fit.as_ref())?;
        run.artifacts.extend(fitted);
        for (metric, cells) in &metric_cells {
            let grid = build_jump_grid(&ds, &heads, *metric, cells, unembedder.as_ref(), part)?;
            let stem = format!("{}_{}", metric.name(), variant.short_name());
            let csv_path = a.out.join(format!("{stem}.csv"));
            let json_path = a.out.join(format!("{stem}.json"));
            write_bytes(&csv_path, &grid.to_csv())?;
            write_bytes(&json_path, grid.to_json().as_bytes())?;
            eprintln!("{stem}: {} cells", grid.cells.len());
            run.artifacts.push(csv_path.display().to_string());
            run.artifacts.push(json_path.display().to_string());
        }
    }
    run.config = serde_json::json!({
        "variants": variants,
        "metrics": metrics,
        "split": part,
        "final_norm": !a.no_final_norm,
        "fit": fit,
    });
    if let Some(cfg) = &fit {
        run.seeds.insert("fit".into(), cfg.seed);
    }
    run.write(&a.out, started)
}

fn parse_lambdas(s: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            let v: f64 = x
                .trim()
                .parse()
                .map_err(|_| usage(format!("bad lambda {x:?}")))?;
            if v > 0.0 && v <= 1.0 {
                Ok(v)
            } else {
                Err(usage(format!("lambda must lie in (0, 1], got {v}")))
            }
        })
        .collect()
}

fn parse_blocks(s: &str, num_blocks: usize) -> anyhow::Result<Vec<usize>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok((0..num_blocks).collect());
    }
    let blocks: Vec<usize> = s
        .split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| usage(format!("bad block {x:?}")))
        })
        .collect::<anyhow::Result<_>>()?;
    if let Some(b) = blocks.iter().find(|&&b| b >= num_blocks) {
        return Err(usage(format!(
            "eligible block {b} must be below the final block {num_blocks}"
        )));
    }
    Ok(blocks)
}

#[derive(Debug, Serialize)]
struct SweepRow {
    lambda: f64,
    early_exits: usize,
    samples: usize,
    mean_exit_block: f64,
    agreement: f64,
    skipped_fraction: f64,
}

fn cmd_simulate(a: &SimulateArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let variant = parse_variant(&a.variant)?;
    let lambdas = parse_lambdas(&a.lambda)?;
    let fit = fit_for(&a.fit, a.fit_missing, a.heads.as_deref())?;
    let ds = open_dataset(&a.data)?;
    let nb = ds.num_blocks();
    let eligible = parse_blocks(&a.eligible, nb)?;
    let cells: Vec<(usize, usize)> = eligible.iter().map(|&l| (l, nb)).collect();
    let (heads, fitted) = obtain_heads(&ds, variant, &cells, a.heads.as_deref(), fit.as_ref())?;
    let unembedder = unembedder_for(&ds, a.no_final_norm)?;
    let source = ExitSource::Dataset {
        dataset: &ds,
        part: a.split.into(),
    };
    create_dir(&a.out)?;
    let mut run = RunManifest::new("simulate", Some(&a.data));
    run.artifacts = fitted;
    let mut sweep = Vec::new();
    for &lambda in &lambdas {
        let policy = ExitPolicy::new(lambda, eligible.clone(), variant)?;
        let trace = run_early_exit(&source, &heads, &policy, Some(&unembedder))?;
        let stem = format!("trace_{}_lambda{}", variant.short_name(), lambda);
        trace.write(&a.out, &stem)?;
        run.artifacts
            .push(a.out.join(format!("{stem}.json")).display().to_string());
        run.artifacts
            .push(a.out.join(format!("{stem}.csv")).display().to_string());
        eprintln!(
            "lambda {lambda}: {} of {} exit early, mean exit block {:.3}, agreement {:.4}, skipped {:.4}",
            trace.early_exits,
            trace.records.len(),
            trace.mean_exit_block,
            trace.agreement,
            trace.skipped_fraction
        );
        sweep.push(SweepRow {
            lambda,
            early_exits: trace.early_exits,
            samples: trace.records.len(),
            mean_exit_block: trace.mean_exit_block,
            agreement: trace.agreement,
            skipped_fraction: trace.skipped_fraction,
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &sweep {
        w.serialize(row)?;
    }
    let sweep_path = a.out.join(format!("sweep_{}.csv", variant.short_name()));
    write_bytes(&sweep_path, &w.into_inner()?)?;
    run.artifacts.push(sweep_path.display().to_string());
    run.config = serde_json::json!({
        "variant": variant,
        "lambdas": lambdas,
        "eligible_blocks": eligible,
        "split": SplitPart::from(a.split),
        "final_norm": !a.no_final_norm,
        "fit": fit,
    });
    run.write(&a.out, started)
}

/// One row of the per-variant curves to the final block.
#[derive(Debug, Clone, Serialize)]
pub struct CurveRow {
    pub variant: String,
    pub from_block: usize,
    pub to_block: usize,
    pub r2: f64,
    pub precision: f64,
    pub surprisal: f64,
    pub n: usize,
}

/// Whether N-NJTC beats Identity on precision at every block from 1 up
/// to half the depth.
#[derive(Debug, Clone, Serialize)]
pub struct DepthComparison {
    pub blocks: Vec<usize>,
    pub wins: usize,
    pub pass: bool,
}

pub fn depth_comparison(rows: &[CurveRow], num_blocks: usize) -> DepthComparison {
    let at = |v: Variant, l: usize| {
        rows.iter()
            .find(|r| r.variant == v.short_name() && r.from_block == l)
            .map(|r| r.precision)
    };
    let blocks: Vec<usize> = (1..=num_blocks / 2).collect();
    let wins = blocks
        .iter()
        .filter(
            |&&l| match (at(Variant::NormalizedLowRank, l), at(Variant::Identity, l)) {
                (Some(n), Some(i)) => n > i,
                _ => false,
            },
        )
        .count();
    DepthComparison {
        pass: !blocks.is_empty() && wins == blocks.len(),
        blocks,
        wins,
    }
}

fn cmd_report(a: &ReportArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let fit = fit_for(&a.fit, a.fit_missing, a.heads.as_deref())?;
    let ds = open_dataset(&a.data)?;
    let nb = ds.num_blocks();
    let part = SplitPart::from(a.split);
    let unembedder = unembedder_for(&ds, a.no_final_norm)?;
    let cells = to_final(nb);
    create_dir(&a.out)?;
    let mut run = RunManifest::new("report", Some(&a.data));
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let (heads, fitted) = obtain_heads(&ds, variant, &cells, a.heads.as_deref(), fit.as_ref())?;
        run.artifacts.extend(fitted);
        let grids: Vec<JumpEvalGrid> = [Metric::R2, Metric::Precision, Metric::Surprisal]
            .into_iter()
            .map(|m| build_jump_grid(&ds, &heads, m, &cells, Some(&unembedder), part))
            .collect::<Result<_, _>>()?;
        for &(l, m) in &cells {
            let value = |g: &JumpEvalGrid| g.get(l, m).map(|c| c.value).unwrap_or(f64::NAN);
            rows.push(CurveRow {
                variant: variant.short_name().to_string(),
                from_block: l,
                to_block: m,
                r2: value(&grids[0]),
                precision: value(&grids[1]),
                surprisal: value(&grids[2]),
                n: grids[1].get(l, m).map_or(0, |c| c.n),
            });
        }
    }
    let idx = ds.split.indices(part);
    if idx.is_empty() {
        return Err(anyhow!(MetricError::EmptySplit(part)));
    }
    let truth = ds.rows_f64(nb, &idx)?;
    let self_precision = precision(truth.view(), truth.view(), &unembedder)?;
    let self_surprisal = surprisal(truth.view(), truth.view(), &unembedder)?;
    let depth = depth_comparison(&rows, nb);

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let curves_path = a.out.join("curves.csv");
    write_bytes(&curves_path, &w.into_inner()?)?;
    let report = serde_json::json!({
        "model_name": ds.manifest.model_name,
        "num_blocks": nb,
        "hidden_dim": ds.hidden_dim(),
        "split": part,
        "final_norm": !a.no_final_norm,
        "true_final_precision": self_precision,
        "true_final_self_surprisal": self_surprisal,
        "nnjtc_beats_identity_to_half_depth": depth,
        "curves": rows,
    });
    let json_path = a.out.join("report.json");
    write_json(&json_path, &report)?;
    let md_path = a.out.join("report.md");
    write_bytes(
        &md_path,
        render_markdown(&ds, &rows, &depth, self_precision, self_surprisal).as_bytes(),
    )?;
    println!(
        "N-NJTC precision above Identity at blocks 1..={}: {}/{} [{}]",
        nb / 2,
        depth.wins,
        depth.blocks.len(),
        if depth.pass { "PASS" } else { "FAIL" }
    );
    run.artifacts.extend(
        [curves_path, json_path, md_path]
            .iter()
            .map(|p| p.display().to_string()),
    );
    run.config = serde_json::json!({ "split": part, "final_norm": !a.no_final_norm, "fit": fit });
    run.write(&a.out, started)
}

fn render_markdown(
    ds: &HiddenPairDataset,
    rows: &[CurveRow],
    depth: &DepthComparison,
    self_precision: f64,
    self_surprisal: f64,
) -> String {
    let mut s = format!(
        "# Shortcut report: {}\n\nH = {}, {} blocks, {} samples.\n\n",
        ds.manifest.model_name,
        ds.hidden_dim(),
        ds.num_blocks(),
        ds.num_samples()
    );
    s.push_str(&format!(
        "True final state against itself: precision {self_precision:.4}, surprisal {self_surprisal:.4} nats.\n\n"
    ));
    s.push_str("| variant | from | r2 | precision | surprisal |\n|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {:.4} |\n",
            r.variant, r.from_block, r.r2, r.precision, r.surprisal
        ));
    }
    s.push_str(&format!(
        "\nN-NJTC precision above Identity at blocks {:?}: {}/{} [{}]\n",
        depth.blocks,
        depth.wins,
        depth.blocks.len(),
        if depth.pass { "PASS" } else { "FAIL" }
    ));
    s
}
