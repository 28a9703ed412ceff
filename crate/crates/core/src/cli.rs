//! The `coophash` command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{validate_config, TrainConfig};
use crate::data::{load_dataset, make_splits, Dataset, Format, SplitSizes};
use crate::error::{Error, Result};
use crate::losses::LossMask;
use crate::retrieval::{evaluate, search, HashIndex, MetricRecord};
use crate::training::{build_index, check_mask, encode, fit, queries, NoCallbacks, TrainState};

#[derive(Debug, Parser)]
#[command(name = "coophash", version, about = "Cooperative generative hashing: train, encode, index, query, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from scratch (or resume) and write checkpoints, train_log.jsonl and curves.csv.
    Train(Common),
    /// Write real and binary codes of the evaluation split to codes.jsonl.
    Encode(Common),
    /// Build index.bin over the database split.
    Index(Common),
    /// Rank the database for every query; writes rankings.jsonl.
    Query(Common),
    /// Write mAP@k and P@k to metrics.json.
    Evaluate(Common),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    #[value(name = "NLL")]
    Nll,
    #[value(name = "VAE")]
    Vae,
    #[value(name = "TR")]
    Tr,
    #[value(name = "CLASS")]
    Class,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Query,
    Database,
    Train,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config with TrainConfig fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Losses to disable.
    #[arg(long, value_enum, num_args = 1.., action = clap::ArgAction::Append)]
    pub ablate: Vec<Ablation>,
    /// Evaluate on this source instead of --eval-source (checkpoint unchanged).
    #[arg(long)]
    pub ood_eval_source: Option<String>,
    /// Retrieval cutoff.
    #[arg(long)]
    pub k: Option<usize>,
    /// Code length K; must agree with the checkpoint.
    #[arg(long)]
    pub bits: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Training data: an IDX file or directory, a PNG directory, or `blobs:...`.
    #[arg(long)]
    pub train_source: Option<String>,
    /// Evaluation data; defaults to --train-source.
    #[arg(long)]
    pub eval_source: Option<String>,
    #[arg(long, value_parser = parse_format)]
    pub format: Option<Format>,
    /// Checkpoint to read; defaults to the latest ckpt_*.bin in --out.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Index file for `query`; defaults to OUT/index.bin.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Split to encode.
    #[arg(long, value_enum, default_value = "query")]
    pub split: SplitArg,
    /// Continue from the latest checkpoint in --out.
    #[arg(long)]
    pub resume: bool,
}

fn parse_format(s: &str) -> std::result::Result<Format, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Standard,
    Ood,
    Ablation,
}

/// Resolved inputs of one command.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub config: TrainConfig,
    pub mask: LossMask,
    pub mode: Mode,
    pub train_source: Option<String>,
    pub eval_source: Option<String>,
    pub format: Option<Format>,
    pub out: PathBuf,
}

pub fn mask_from(ablate: &[Ablation]) -> Result<LossMask> {
    let mut m = LossMask::default();
    for a in ablate {
        match a {
            Ablation::Nll => m.nll = false,
            Ablation::Vae => m.vae = false,
            Ablation::Tr => m.triplet = false,
            Ablation::Class => m.class = false,
        }
    }
    check_mask(m)?;
    Ok(m)
}

fn load_config(args: &Common) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p).map_err(|e| Error::config("config", format!("{}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(b) = args.bits {
        cfg.code_bits = b;
    }
    validate_config(cfg)
}

impl ExperimentSpec {
    pub fn from_args(args: &Common) -> Result<Self> {
        let config = load_config(args)?;
        let mask = mask_from(&args.ablate)?;
        let mode = if args.ood_eval_source.is_some() {
            Mode::Ood
        } else if args.ablate.is_empty() {
            Mode::Standard
        } else {
            Mode::Ablation
        };
        let eval_source = args.ood_eval_source.clone().or_else(|| args.eval_source.clone()).or_else(|| args.train_source.clone());
        Ok(ExperimentSpec {
            config,
            mask,
            mode,
            train_source: args.train_source.clone(),
            eval_source,
            format: args.format,
            out: args.out.clone(),
        })
    }
}

fn sizes(cfg: &TrainConfig) -> SplitSizes {
    SplitSizes { train: cfg.train_size, query: cfg.query_size, database: cfg.database_size }
}

fn split_dataset(source: &str, format: Option<Format>, cfg: &TrainConfig) -> Result<Dataset> {
    let ds = load_dataset(source, format)?;
    make_splits(&ds, sizes(cfg), cfg.seed)
}

pub fn cmd_train(args: &Common) -> Result<TrainState> {
    let spec = ExperimentSpec::from_args(args)?;
    let source = spec.train_source.as_deref().ok_or_else(|| Error::config("train_source", "--train-source is required"))?;
    let data = split_dataset(source, spec.format, &spec.config)?;
    fs::create_dir_all(&spec.out)?;
    let state = match checkpoint::latest(&spec.out)? {
        Some(path) if args.resume => {
            let s = TrainState::load(&path)?;
            if s.mask != spec.mask {
                return Err(Error::config("ablate", "resume with a different ablation mask"));
            }
            TrainState { cfg: TrainConfig { iterations: spec.config.iterations, ..s.cfg.clone() }, ..s }
        }
        _ => TrainState::new(&spec.config, data.shape, spec.mask)?,
    };
    fit(state, &data, &mut NoCallbacks, Some(&spec.out))
}

/// Loads the checkpoint and checks it against `--bits` / `--config`.
fn load_model(args: &Common) -> Result<TrainState> {
    let path = match &args.checkpoint {
        Some(p) => p.clone(),
        None => checkpoint::latest(&args.out)?.ok_or_else(|| Error::MissingFile(args.out.join("ckpt_*.bin")))?,
    };
    let state = TrainState::from_checkpoint(&Checkpoint::load(&path)?)?;
    let k = state.cfg.code_bits;
    let wanted = match (&args.bits, &args.config) {
        (Some(b), _) => Some(*b),
        (None, Some(p)) => Some(TrainConfig::load(p).map_err(|e| Error::config("config", e.to_string()))?.code_bits),
        _ => None,
    };
    if let Some(w) = wanted {
        if w != k {
            return Err(Error::config("K", format!("checkpoint has K = {k} but {w} bits were requested")));
        }
    }
    Ok(state)
}

fn eval_data(args: &Common, state: &TrainState) -> Result<Dataset> {
    let spec = ExperimentSpec::from_args(&Common { bits: None, config: None, ablate: Vec::new(), ..args.clone() })?;
    let source = spec.eval_source.ok_or_else(|| Error::config("eval_source", "--eval-source (or --train-source) is required"))?;
    let ds = split_dataset(&source, spec.format, &state.cfg)?;
    if ds.shape != state.shape() {
        return Err(Error::Shape(format!("evaluation images {:?} vs model {:?}", ds.shape, state.shape())));
    }
    ds.check_labels(state.cfg.num_classes)?;
    Ok(ds)
}

#[derive(Serialize)]
struct CodeLine<'a> {
    id: usize,
    labels: &'a [usize],
    real_code: Vec<f32>,
    binary_code: Vec<i8>,
}

pub fn cmd_encode(args: &Common) -> Result<PathBuf> {
    let state = load_model(args)?;
    let ds = eval_data(args, &state)?;
    let ids = match args.split {
        SplitArg::Query => &ds.splits.query,
        SplitArg::Database => &ds.splits.database,
        SplitArg::Train => &ds.splits.train,
    };
    let codes = encode(&state.descriptor, &ds, ids)?;
    fs::create_dir_all(&args.out)?;
    let path = args.out.join("codes.jsonl");
    let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
    for (&i, row) in ids.iter().zip(codes.rows()) {
        let real_code = row.to_vec();
        let binary_code = real_code.iter().map(|&v| crate::types::sign(v as f64)).collect();
        serde_json::to_writer(&mut w, &CodeLine { id: i, labels: ds.labels(i), real_code, binary_code })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(path)
}

pub fn cmd_index(args: &Common) -> Result<PathBuf> {
    let state = load_model(args)?;
    let ds = eval_data(args, &state)?;
    let index = build_index(&state.descriptor, &ds, &ds.splits.database)?;
    fs::create_dir_all(&args.out)?;
    let path = args.index.clone().unwrap_or_else(|| args.out.join("index.bin"));
    index.save(&path)?;
    Ok(path)
}

pub fn cmd_query(args: &Common) -> Result<PathBuf> {
    let state = load_model(args)?;
    let ds = eval_data(args, &state)?;
    let index_path = args.index.clone().unwrap_or_else(|| args.out.join("index.bin"));
    let index = HashIndex::load(&index_path)?;
    if index.bits() != state.cfg.code_bits {
        return Err(Error::config("K", format!("index has K = {} but the checkpoint has {}", index.bits(), state.cfg.code_bits)));
    }
    let q = queries(&state.descriptor, &ds, &ds.splits.query)?;
    let k = args.k.unwrap_or(state.cfg.probe_k);
    fs::create_dir_all(&args.out)?;
    let path = args.out.join("rankings.jsonl");
    let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
    for (&id, code) in q.ids.iter().zip(&q.codes) {
        serde_json::to_writer(&mut w, &search(&index, id, code, k)?)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(path)
}

pub fn cmd_evaluate(args: &Common) -> Result<Vec<MetricRecord>> {
    let state = load_model(args)?;
    let ds = eval_data(args, &state)?;
    let k = args.k.unwrap_or(state.cfg.probe_k);
    let index = build_index(&state.descriptor, &ds, &ds.splits.database)?;
    let q = queries(&state.descriptor, &ds, &ds.splits.query)?;
    let metrics = evaluate(&index, &q, k)?;
    write_metrics(&args.out, &metrics)?;
    Ok(metrics)
}

pub fn write_metrics(dir: &Path, metrics: &[MetricRecord]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("metrics.json");
    fs::write(&path, serde_json::to_string_pretty(metrics)? + "\n")?;
    Ok(path)
}

/// Process exit status for an error: 2 for configuration, 3 for divergence.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let report = match cli.command {
        Command::Train(a) => {
            let s = cmd_train(&a)?;
            format!("trained to iteration {}; checkpoint {}\n", s.iteration, a.out.join(checkpoint::file_name(s.iteration)).display())
        }
        Command::Encode(a) => format!("{}\n", cmd_encode(&a)?.display()),
        Command::Index(a) => format!("{}\n", cmd_index(&a)?.display()),
        Command::Query(a) => format!("{}\n", cmd_query(&a)?.display()),
        Command::Evaluate(a) => cmd_evaluate(&a)?
            .iter()
            .map(|m| format!("{}@{} = {:.4} ({} queries)\n", m.metric, m.k, m.value, m.n_queries))
            .collect(),
    };
    // a closed stdout (e.g. piped into `head`) is not an error
    match std::io::stdout().write_all(report.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_names_parse() {
        let cli = Cli::try_parse_from(["coophash", "train", "--ablate", "NLL", "TR", "--ablate", "CLASS"]).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        assert_eq!(a.ablate, vec![Ablation::Nll, Ablation::Tr, Ablation::Class]);
        let m = mask_from(&a.ablate).unwrap();
        assert_eq!(m, LossMask { nll: false, vae: true, triplet: false, class: false });
    }

    #[test]
    fn masking_everything_is_a_config_error() {
        let err = mask_from(&[Ablation::Nll, Ablation::Vae, Ablation::Tr, Ablation::Class]).unwrap_err();
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Divergence { iteration: 3, component: "vae" }), 3);
        assert_eq!(exit_code(&Error::NoItems), 1);
    }
}
