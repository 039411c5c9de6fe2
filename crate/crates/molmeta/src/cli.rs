//! Command-line pipeline: CSV ingestion, flat key=value configuration with
//! flag overrides, training/evaluation runs, multi-seed experiments, and
//! metrics export.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! divergence.

use crate::chem::parse_smiles;
use crate::meta::{evaluate_split, stream_rng, train, MetaError, TrainConfig, TrainLog};
use crate::mpg::{build_mpg, mask_labels, split_properties, Dataset, Mpg, PropertySplit};
use crate::relnet::ModelParams;
use crate::scheduler::SchedulerParams;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("line {line}: expected {expected} cells, found {found}")]
    RowArityMismatch {
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Meta(MetaError::InvalidConfig(_)) => 2,
            CliError::Meta(MetaError::NumericalDivergence(_)) => 4,
            _ => 3,
        }
    }
}

// --- ingestion ---

pub struct Ingested {
    pub dataset: Dataset,
    /// Rows dropped because their SMILES did not parse.
    pub dropped: usize,
}

/// Reads a label-matrix CSV: header `smiles,<property>...`, body rows of a
/// SMILES string followed by `1`, `0`, or an empty cell per property.
/// Unparseable SMILES rows are dropped with a logged warning and counted.
pub fn ingest(path: &Path) -> Result<Ingested, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let header = reader.headers()?.clone();
    if header.get(0).map(str::trim) != Some("smiles") {
        return Err(CliError::MalformedHeader(format!(
            "first column must be \"smiles\", got {:?}",
            header.get(0).unwrap_or("")
        )));
    }
    if header.len() < 2 {
        return Err(CliError::MalformedHeader(
            "need at least one property column after \"smiles\"".into(),
        ));
    }
    let names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();

    let mut smiles = Vec::new();
    let mut labels = Vec::new();
    let mut dropped = 0usize;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != header.len() {
            return Err(CliError::RowArityMismatch {
                line,
                expected: header.len(),
                found: record.len(),
            });
        }
        let smi = record.get(0).unwrap_or("").trim().to_string();
        if let Err(e) = parse_smiles(&smi) {
            log::warn!("line {line}: dropping unparseable SMILES {smi:?}: {e}");
            dropped += 1;
            continue;
        }
        let mut row = Vec::with_capacity(names.len());
        for cell in record.iter().skip(1) {
            row.push(match cell.trim() {
                "" => None,
                "0" => Some(false),
                "1" => Some(true),
                other => {
                    return Err(CliError::Data(format!(
                        "line {line}: label cells must be 0, 1, or empty, got {other:?}"
                    )))
                }
            });
        }
        smiles.push(smi);
        labels.extend(row);
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} undecodable rows from {}", path.display());
    }
    let dataset = Dataset::new(smiles, names, labels).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(Ingested { dataset, dropped })
}

// --- configuration ---

/// Everything one experiment needs beyond the training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    /// The last N properties are held out for meta-testing.
    pub n_test_props: usize,
    /// Fraction of train-property labels hidden when building the graph.
    pub mask_ratio: f64,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: None,
            n_test_props: 1,
            mask_ratio: 0.0,
            seeds: vec![0],
            out_dir: PathBuf::from("out"),
            train: TrainConfig::default(),
        }
    }
}

fn parse_as<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| CliError::Config(format!("key {key}: cannot parse {value:?}: {e}")))
}

/// Applies one `key=value` setting; every [`TrainConfig`] field is
/// addressable by its name alongside the experiment-level keys.
pub fn apply_key(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<(), CliError> {
    let t = &mut cfg.train;
    match key {
        "dataset" => cfg.dataset = Some(PathBuf::from(value.trim())),
        "out_dir" => cfg.out_dir = PathBuf::from(value.trim()),
        "n_test_props" => cfg.n_test_props = parse_as(key, value)?,
        "mask_ratio" => cfg.mask_ratio = parse_as(key, value)?,
        "seeds" => {
            cfg.seeds = value
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| parse_as(key, s))
                .collect::<Result<_, _>>()?;
        }
        "seed" => {
            let s: u64 = parse_as(key, value)?;
            cfg.seeds = vec![s];
        }
        "k_shot" => t.k_shot = parse_as(key, value)?,
        "m_query" => t.m_query = parse_as(key, value)?,
        "n_aux" => t.n_aux = parse_as(key, value)?,
        "n_pool" => t.n_pool = parse_as(key, value)?,
        "batch" => t.batch = parse_as(key, value)?,
        "enc_layers" => t.enc_layers = parse_as(key, value)?,
        "rel_layers" => t.rel_layers = parse_as(key, value)?,
        "dim" => t.dim = parse_as(key, value)?,
        "inner_lr" => t.inner_lr = parse_as(key, value)?,
        "outer_lr" => t.outer_lr = parse_as(key, value)?,
        "sched_lr" => t.sched_lr = parse_as(key, value)?,
        "tau" => t.tau = parse_as(key, value)?,
        "lambda" => t.lambda = parse_as(key, value)?,
        "max_steps" => t.max_steps = parse_as(key, value)?,
        "eval_interval" => t.eval_interval = parse_as(key, value)?,
        "inner_steps" => t.inner_steps = parse_as(key, value)?,
        "finetune_steps" => t.finetune_steps = parse_as(key, value)?,
        "finetune_lr" => t.finetune_lr = Some(parse_as(key, value)?),
        "no_m2m" => t.no_m2m = parse_as(key, value)?,
        "no_edge_types" => t.no_edge_types = parse_as(key, value)?,
        "no_scheduler" => t.no_scheduler = parse_as(key, value)?,
        "no_contrastive" => t.no_contrastive = parse_as(key, value)?,
        "ntxent_standard" => t.ntxent_standard = parse_as(key, value)?,
        "distinct_targets" => t.distinct_targets = parse_as(key, value)?,
        other => return Err(CliError::Config(format!("unknown key {other:?}"))),
    }
    Ok(())
}

/// Parses a flat `key=value` file; `#` starts a comment, blank lines are
/// skipped.
pub fn load_config_file(cfg: &mut ExperimentConfig, path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("{}:{}: expected key=value", path.display(), i + 1))
        })?;
        apply_key(cfg, key.trim(), value)?;
    }
    Ok(())
}

// --- command-line surface ---

#[derive(Debug, Parser)]
#[command(
    name = "molmeta",
    version,
    about = "Few-shot molecular property prediction on a molecule-property relation graph"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a label CSV and print dataset statistics.
    Ingest {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Train one model; writes checkpoint, training log, and evaluation CSV.
    Train(RunArgs),
    /// Evaluate a saved checkpoint on the held-out properties.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint JSON written by `train` or `experiment`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train across a seed list and aggregate per-property results.
    Experiment(RunArgs),
    /// Rebuild the target co-selection matrix from a training log.
    ExportCoselection {
        /// Training log JSON written by `train` or `experiment`.
        #[arg(long)]
        log: PathBuf,
        /// Label CSV; used for property names when given.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// Flat key=value config file; explicit flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Random seed; repeat the flag for multi-seed experiments.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub n_test_props: Option<usize>,
    #[arg(long)]
    pub k_shot: Option<usize>,
    #[arg(long)]
    pub n_aux: Option<usize>,
    /// Fraction of train-property labels hidden when building the graph.
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// Disable one model component; repeatable.
    #[arg(long = "ablate", value_enum)]
    pub ablate: Vec<Ablation>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    M2m,
    EdgeTypes,
    Scheduler,
    Contrastive,
}

/// Layering: defaults, then the config file, then explicit flags.
pub fn resolve_config(run: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &run.config {
        load_config_file(&mut cfg, path)?;
    }
    if let Some(d) = &run.dataset {
        cfg.dataset = Some(d.clone());
    }
    if !run.seeds.is_empty() {
        cfg.seeds = run.seeds.clone();
    }
    if let Some(n) = run.n_test_props {
        cfg.n_test_props = n;
    }
    if let Some(k) = run.k_shot {
        cfg.train.k_shot = k;
    }
    if let Some(n) = run.n_aux {
        cfg.train.n_aux = n;
    }
    if let Some(r) = run.mask_ratio {
        cfg.mask_ratio = r;
    }
    for a in &run.ablate {
        match a {
            Ablation::M2m => cfg.train.no_m2m = true,
            Ablation::EdgeTypes => cfg.train.no_edge_types = true,
            Ablation::Scheduler => cfg.train.no_scheduler = true,
            Ablation::Contrastive => cfg.train.no_contrastive = true,
        }
    }
    if let Some(d) = &run.out_dir {
        cfg.out_dir = d.clone();
    }

    if cfg.seeds.is_empty() {
        return Err(CliError::Config("seed list must not be empty".into()));
    }
    if !(0.0..1.0).contains(&cfg.mask_ratio) {
        return Err(CliError::Config("mask_ratio must be in [0, 1)".into()));
    }
    if cfg.n_test_props == 0 {
        return Err(CliError::Config("n_test_props must be at least 1".into()));
    }
    cfg.train.validate()?;
    Ok(cfg)
}

// --- artifacts ---

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub n_test_props: usize,
    pub mask_ratio: f64,
    pub model: ModelParams,
    pub scheduler: SchedulerParams,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string(value)?)?;
    Ok(())
}

fn write_eval_csv(path: &Path, names: &[String], aucs: &[(usize, f64)]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["property", "auc"])?;
    for &(p, auc) in aucs {
        w.write_record([names[p].as_str(), &auc.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Co-selection counts over a training log: for every unordered pair of
/// selections within one step, both symmetric cells are incremented —
/// except a same-target pair, which bumps the diagonal once. Symmetric by
/// construction; zero diagonal whenever duplicate targets were forbidden.
pub fn coselection_counts(log: &TrainLog, n_properties: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; n_properties]; n_properties];
    for rec in &log.steps {
        for (i, &a) in rec.targets.iter().enumerate() {
            for &b in &rec.targets[i + 1..] {
                if a == b {
                    m[a][a] += 1;
                } else {
                    m[a][b] += 1;
                    m[b][a] += 1;
                }
            }
        }
    }
    m
}

fn write_coselection_csv(path: &Path, names: &[String], m: &[Vec<u64>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["property".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (i, row) in m.iter().enumerate() {
        let mut cells = vec![names[i].clone()];
        cells.extend(row.iter().map(u64::to_string));
        w.write_record(&cells)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and standard deviation over seeds: the sample formula (n−1) for two
/// or more values, the population formula (which is 0) for a single one.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty());
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn write_aggregate_csv(
    path: &Path,
    names: &[String],
    per_prop: &BTreeMap<usize, Vec<f64>>,
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["property", "mean_auc", "std_auc", "n_seeds", "std_formula"])?;
    for (&p, values) in per_prop {
        let (mean, std) = mean_std(values);
        let formula = if values.len() == 1 { "population" } else { "sample" };
        w.write_record([
            names[p].as_str(),
            &mean.to_string(),
            &std.to_string(),
            &values.len().to_string(),
            formula,
        ])?;
    }
    w.flush()?;
    Ok(())
}

// --- pipeline stages ---

fn require_dataset(cfg: &ExperimentConfig) -> Result<&Path, CliError> {
    cfg.dataset
        .as_deref()
        .ok_or_else(|| CliError::Config("dataset is required (--dataset or dataset= key)".into()))
}

/// Builds the relation graph for one seed: optional label masking on the
/// train properties, then graph construction, then the property split.
fn prepare_graph(
    ds: &Dataset,
    n_test: usize,
    mask_ratio: f64,
    dim: usize,
    seed: u64,
) -> Result<(Mpg, PropertySplit), CliError> {
    if n_test >= ds.n_properties() {
        return Err(CliError::Config(format!(
            "n_test_props {} must be below the property count {}",
            n_test,
            ds.n_properties()
        )));
    }
    let train_props: Vec<usize> = (0..ds.n_properties() - n_test).collect();
    let masked = if mask_ratio > 0.0 {
        mask_labels(ds, mask_ratio, &train_props, &mut stream_rng(seed, "masking"))
    } else {
        ds.clone()
    };
    let mpg = build_mpg(&masked, dim, &mut stream_rng(seed, "prop_init"))
        .map_err(|e| CliError::Data(e.to_string()))?;
    let split = split_properties(&mpg, n_test).map_err(|e| CliError::Data(e.to_string()))?;
    Ok((mpg, split))
}

/// Trains one seed and writes its artifacts (checkpoint, log, eval CSV,
/// co-selection CSV) immediately, so partial experiment results survive a
/// later failure. Returns the final held-out AUCs.
fn run_one_seed(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    seed: u64,
) -> Result<Vec<(usize, f64)>, CliError> {
    let (mpg, split) = prepare_graph(ds, cfg.n_test_props, cfg.mask_ratio, cfg.train.dim, seed)?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let out = train(&mpg, &split, &tc)?;
    let aucs = evaluate_split(&out.model, &mpg, &split, &tc, &mut stream_rng(seed, "eval:final"))?;

    let dir = &cfg.out_dir;
    write_json(
        &dir.join(format!("checkpoint_seed{seed}.json")),
        &Checkpoint {
            config: tc,
            n_test_props: cfg.n_test_props,
            mask_ratio: cfg.mask_ratio,
            model: out.model,
            scheduler: out.scheduler,
        },
    )?;
    write_json(&dir.join(format!("log_seed{seed}.json")), &out.log)?;
    write_eval_csv(&dir.join(format!("eval_seed{seed}.csv")), mpg.property_names(), &aucs)?;
    write_coselection_csv(
        &dir.join(format!("coselection_seed{seed}.csv")),
        mpg.property_names(),
        &coselection_counts(&out.log, mpg.n_properties()),
    )?;
    Ok(aucs)
}

/// Full experiment: every seed trained and written out, then the aggregate
/// CSV. A failing seed still flushes the aggregate over the seeds that
/// completed before the error is returned.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let path = require_dataset(cfg)?;
    let ds = ingest(path)?.dataset;
    fs::create_dir_all(&cfg.out_dir)?;

    let mut per_prop: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut completed = 0usize;
    let mut failure = None;
    for &seed in &cfg.seeds {
        match run_one_seed(cfg, &ds, seed) {
            Ok(aucs) => {
                for (p, auc) in aucs {
                    per_prop.entry(p).or_default().push(auc);
                }
                completed += 1;
                log::info!("seed {seed} done ({completed}/{})", cfg.seeds.len());
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    if completed > 0 {
        write_aggregate_csv(
            &cfg.out_dir.join("aggregate.csv"),
            ds.property_names(),
            &per_prop,
        )?;
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Re-evaluates a checkpoint: the graph is rebuilt with the checkpoint's
/// training seed (so masking matches what the model saw), while the support
/// draw follows the `--seed` flag when given.
pub fn evaluate_checkpoint(
    run: &RunArgs,
    checkpoint: &Path,
) -> Result<Vec<(String, f64)>, CliError> {
    let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(checkpoint)?)?;
    let cfg = resolve_config(run)?;
    let path = require_dataset(&cfg)?;
    let ds = ingest(path)?.dataset;
    let (mpg, split) =
        prepare_graph(&ds, ck.n_test_props, ck.mask_ratio, ck.config.dim, ck.config.seed)?;
    let eval_seed = run.seeds.first().copied().unwrap_or(ck.config.seed);
    let aucs = evaluate_split(
        &ck.model,
        &mpg,
        &split,
        &ck.config,
        &mut stream_rng(eval_seed, "eval:cli"),
    )?;
    Ok(aucs
        .into_iter()
        .map(|(p, auc)| (mpg.property_names()[p].clone(), auc))
        .collect())
}

pub fn export_coselection(
    log_path: &Path,
    dataset: Option<&Path>,
    out_dir: &Path,
) -> Result<PathBuf, CliError> {
    let log: TrainLog = serde_json::from_str(&fs::read_to_string(log_path)?)?;
    let names: Vec<String> = match dataset {
        Some(p) => ingest(p)?.dataset.property_names().to_vec(),
        None => {
            let n = log
                .steps
                .iter()
                .flat_map(|r| r.targets.iter().copied())
                .max()
                .map_or(0, |m| m + 1);
            (0..n).map(|i| format!("p{i}")).collect()
        }
    };
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join("coselection.csv");
    write_coselection_csv(&path, &names, &coselection_counts(&log, names.len()))?;
    Ok(path)
}

// --- dispatch ---

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest { dataset } => {
            let ing = ingest(&dataset)?;
            let ds = ing.dataset;
            let total = ds.n_molecules() * ds.n_properties();
            let present = ds.present_count(&(0..ds.n_properties()).collect::<Vec<_>>());
            println!("molecules:       {}", ds.n_molecules());
            println!("properties:      {}", ds.n_properties());
            println!("labels present:  {present}");
            println!("labels missing:  {}", total - present);
            println!("rows dropped:    {}", ing.dropped);
        }
        Command::Train(args) => {
            let mut cfg = resolve_config(&args)?;
            cfg.seeds.truncate(1);
            run_experiment(&cfg)?;
            println!("wrote results to {}", cfg.out_dir.display());
        }
        Command::Experiment(args) => {
            let cfg = resolve_config(&args)?;
            run_experiment(&cfg)?;
            println!("wrote results to {}", cfg.out_dir.display());
        }
        Command::Eval { run: args, checkpoint } => {
            for (name, auc) in evaluate_checkpoint(&args, &checkpoint)? {
                println!("{name}: {auc:.4}");
            }
        }
        Command::ExportCoselection { log, dataset, out_dir } => {
            let path = export_coselection(&log, dataset.as_deref(), &out_dir)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
