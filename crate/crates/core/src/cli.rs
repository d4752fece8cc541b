//! Command-line surface: `generate`, `train`, `evaluate`, `score`, `sweep`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
//! Relative output paths are resolved against `$COHERENCE_HOME` when set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{mean_std, sweep_curves, SweepPoint};
use crate::checkpoint;
use crate::corpus::{load_corpus, prepare_corpus, Corpus, CorpusFormat, Split, WhitespaceTokenizer};
use crate::error::Error;
use crate::evalsuite::{model_agreement, pairwise_accuracy, probe_accuracy, AgreementMode, EvalReport, Provenance};
use crate::manifest::{sha256_path, RunManifest, MANIFEST_FILE};
use crate::nn::TransformerConfig;
use crate::scorer::{backbone_kind_from_name, make_backbone, CoherenceScorer};
use crate::synthetic::{simulated_judgments, synthetic_probes, synthetic_splits};
use crate::taskgen::{
    build_intrusion_dataset, build_permuted_dataset, load_eval_pairs, permuted_eval_pairs,
    read_instances, write_eval_pairs, write_instances, PairSchema, Similarity,
};
use crate::trainer::{Trainer, TrainerConfig};

pub const HOME_ENV: &str = "COHERENCE_HOME";
pub const BUILTIN_SYNTHETIC: &str = "builtin:synthetic";

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const INSTANCES_FILE: &str = "instances.jsonl";
pub const DEV_PAIRS_FILE: &str = "dev_pairs.jsonl";
pub const TEST_PAIRS_FILE: &str = "test_pairs.jsonl";
pub const PROBES_FILE: &str = "probes.jsonl";
pub const JUDGMENTS_FILE: &str = "judgments.jsonl";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Parser)]
#[command(name = "coherence", version, about = "Train and evaluate text coherence scorers")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Build training instances and evaluation pairs from a corpus.
    Generate(GenerateArgs),
    /// Train a scorer on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a pair file.
    Evaluate(EvaluateArgs),
    /// Score documents with a checkpoint.
    Score(ScoreArgs),
    /// Train over a hyperparameter grid and several seeds.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Permuted,
    Intrusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Jsonl,
    Text,
}

impl From<FormatArg> for CorpusFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Jsonl => CorpusFormat::Jsonl,
            FormatArg::Text => CorpusFormat::Text,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenerateArgs {
    /// Corpus file, or `builtin:synthetic` for the bundled generator.
    #[arg(long)]
    pub corpus: String,
    #[arg(long, value_enum, default_value = "jsonl")]
    pub format: FormatArg,
    #[arg(long, value_enum, default_value = "permuted")]
    pub task: Task,
    #[arg(long, default_value_t = 20)]
    pub repetitions: usize,
    /// Negatives per instance (1 pairwise, 5 contrastive, h for mining).
    #[arg(long, default_value_t = 5)]
    pub negatives: usize,
    #[arg(long, default_value = "random")]
    pub similarity: String,
    /// Documents of the built-in corpus used for training.
    #[arg(long, default_value_t = 600)]
    pub synthetic_docs: usize,
    /// Held-out documents for dev and for test pairs.
    #[arg(long, default_value_t = 100)]
    pub holdout_docs: usize,
    /// Permuted pairs per held-out document.
    #[arg(long, default_value_t = 1)]
    pub pairs_per_doc: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Flat TOML file of trainer and backbone settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override (TOML value syntax); repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Resume from a checkpoint directory (e.g. `<out>/last`).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Metric {
    Accuracy,
    Probe,
    Alpha,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    /// Checkpoint or scorer directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, value_enum, default_value = "accuracy")]
    pub metric: Metric,
    /// `rater` (model as an extra annotator) or `majority`.
    #[arg(long, default_value = "rater")]
    pub agreement: String,
    /// Keep pairs flagged as rating ties.
    #[arg(long)]
    pub keep_ties: bool,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub docs: PathBuf,
    #[arg(long, value_enum, default_value = "jsonl")]
    pub format: FormatArg,
    /// Output JSON-lines file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base overrides applied to every run.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// `key=v1,v2,...`; each key is varied on its own against the base.
    #[arg(long = "grid", value_name = "KEY=V1,V2")]
    pub grid: Vec<String>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    /// Concurrent child processes.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Binary to run children with (defaults to this executable).
    #[arg(long)]
    pub bin: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// CLI failure with its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Run(Error::Divergence { .. }) => 3,
            CliError::Run(Error::InvalidArgument(_)) | CliError::Run(Error::UnknownBackbone(_)) => 1,
            CliError::Run(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os(HOME_ENV) {
        Some(home) if path.is_relative() => PathBuf::from(home).join(path),
        _ => path.to_path_buf(),
    }
}

fn args_vec() -> Vec<String> {
    std::env::args().skip(1).collect()
}

fn mkdir(p: &Path) -> CliResult<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e).into())
}

/// Entry point of the `coherence` binary.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cmd: Cmd) -> CliResult<()> {
    match cmd {
        Cmd::Generate(a) => generate(&a).map(|_| ()),
        Cmd::Train(a) => train(&a).map(|_| ()),
        Cmd::Evaluate(a) => evaluate(&a).map(|_| ()),
        Cmd::Score(a) => score(&a),
        Cmd::Sweep(a) => sweep(&a).map(|_| ()),
    }
}

fn split_off_holdout(corpus: Corpus, holdout: usize, seed: u64) -> CliResult<[Corpus; 3]> {
    use rand::seq::SliceRandom;
    let mut docs = corpus.documents;
    if docs.len() < 2 * holdout + 1 {
        return Err(CliError::Usage(format!(
            "{} documents cannot supply 2 x {holdout} held-out documents",
            docs.len()
        )));
    }
    docs.shuffle(&mut crate::taskgen::stream_rng(seed, "holdout", 0));
    let test = docs.split_off(docs.len() - holdout);
    let dev = docs.split_off(docs.len() - holdout);
    Ok([
        Corpus::new(docs, Split::Train)?,
        Corpus::new(dev, Split::Dev)?,
        Corpus::new(test, Split::Test)?,
    ])
}

/// Writes into a staging directory and renames it into place, so a failure
/// leaves no partial output behind.
fn staged<T>(out: &Path, body: impl FnOnce(&Path) -> CliResult<T>) -> CliResult<T> {
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    mkdir(parent)?;
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stage = parent.join(format!(".{name}.partial"));
    if stage.exists() {
        std::fs::remove_dir_all(&stage).map_err(|e| Error::io(&stage, e))?;
    }
    mkdir(&stage)?;
    match body(&stage) {
        Ok(v) => {
            if out.exists() {
                std::fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
            }
            std::fs::rename(&stage, out).map_err(|e| Error::io(out, e))?;
            Ok(v)
        }
        Err(e) => {
            let _ = std::fs::remove_dir_all(&stage);
            Err(e)
        }
    }
}

pub fn generate(a: &GenerateArgs) -> CliResult<RunManifest> {
    let out = resolve(&a.out);
    let similarity = match a.similarity.as_str() {
        "random" => Similarity::Random,
        "lexical" | "lexical-overlap" => Similarity::LexicalOverlap,
        other => return Err(CliError::Usage(format!("unknown similarity {other}"))),
    };
    let mut manifest = RunManifest::new("generate", args_vec(), serde_json::to_value(a).map_err(Error::from)?, vec![a.seed]);
    let builtin = a.corpus == BUILTIN_SYNTHETIC;
    let [train, dev, test] = if builtin {
        synthetic_splits(a.synthetic_docs, a.holdout_docs, a.holdout_docs, a.seed)?
    } else {
        let path = PathBuf::from(&a.corpus);
        manifest.add_input(&path)?;
        let loaded = load_corpus(&path, a.format.into(), Split::Train)?;
        if loaded.skipped > 0 {
            warn!("{} malformed records skipped", loaded.skipped);
        }
        let prepared = prepare_corpus(&loaded.corpus, &WhitespaceTokenizer);
        split_off_holdout(prepared, a.holdout_docs, a.seed)?
    };
    if train.is_empty() {
        return Err(CliError::Run(Error::InvalidArgument("no usable training documents".into())));
    }
    let instances = match a.task {
        Task::Permuted => build_permuted_dataset(&train, a.repetitions, a.negatives, a.seed)?,
        Task::Intrusion => build_intrusion_dataset(&train, similarity, a.seed)?,
    };
    let dev_pairs = if dev.is_empty() { Vec::new() } else { permuted_eval_pairs(&dev, a.pairs_per_doc, a.seed ^ 1)? };
    let test_pairs = if test.is_empty() { Vec::new() } else { permuted_eval_pairs(&test, a.pairs_per_doc, a.seed ^ 2)? };
    staged(&out, |dir| {
        train.write_jsonl(&dir.join(CORPUS_FILE))?;
        write_instances(&dir.join(INSTANCES_FILE), &instances)?;
        write_eval_pairs(&dir.join(DEV_PAIRS_FILE), &dev_pairs)?;
        write_eval_pairs(&dir.join(TEST_PAIRS_FILE), &test_pairs)?;
        let mut files = vec![CORPUS_FILE, INSTANCES_FILE, DEV_PAIRS_FILE, TEST_PAIRS_FILE];
        if builtin {
            let probes = synthetic_probes(&test, 50, a.seed ^ 3);
            write_eval_pairs(&dir.join(PROBES_FILE), &probes)?;
            let judged = simulated_judgments(&test_pairs, 3, 0.1, a.seed ^ 4);
            write_eval_pairs(&dir.join(JUDGMENTS_FILE), &judged)?;
            files.extend([PROBES_FILE, JUDGMENTS_FILE]);
        }
        manifest.outputs = files.iter().map(|f| out.join(f)).collect();
        manifest.notes.insert("instances".into(), instances.len().into());
        manifest.notes.insert("dev_pairs".into(), dev_pairs.len().into());
        manifest.write(&dir.join(MANIFEST_FILE))?;
        info!("wrote {} instances to {}", instances.len(), out.display());
        Ok(manifest.clone())
    })
}

/// Trainer settings plus the backbone choice, as read from a flat TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub trainer: TrainerConfig,
    /// `tiny` or `pretrained`.
    pub backbone: String,
    pub layers: usize,
    pub dim: usize,
    pub weights_dir: Option<PathBuf>,
}

const BACKBONE_KEYS: &[&str] = &["backbone", "layers", "dim", "weights_dir"];

/// Merges the config file and `key=value` overrides into a [`RunConfig`].
/// A seed must come from the file, an override or `seed`.
pub fn resolve_config(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> CliResult<RunConfig> {
    let mut table = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let parsed: toml::Table = o
            .parse()
            .or_else(|_| {
                let (k, v) = o.split_once('=').ok_or(())?;
                format!("{} = \"{}\"", k.trim(), v.trim()).parse().map_err(|_| ())
            })
            .map_err(|_| CliError::Usage(format!("bad override {o:?}, expected key=value")))?;
        table.extend(parsed);
    }
    if let Some(s) = seed {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    if !table.contains_key("seed") {
        return Err(CliError::Usage("a seed is required (--seed or `seed` in the config)".into()));
    }
    let take_usize = |t: &mut toml::Table, k: &str, d: usize| -> CliResult<usize> {
        match t.remove(k) {
            None => Ok(d),
            Some(toml::Value::Integer(i)) if i > 0 => Ok(i as usize),
            Some(v) => Err(CliError::Usage(format!("{k} must be a positive integer, got {v}"))),
        }
    };
    let layers = take_usize(&mut table, "layers", 2)?;
    let dim = take_usize(&mut table, "dim", 32)?;
    let backbone = match table.remove("backbone") {
        None => "tiny".to_string(),
        Some(toml::Value::String(s)) => s,
        Some(v) => return Err(CliError::Usage(format!("backbone must be a string, got {v}"))),
    };
    let weights_dir = match table.remove("weights_dir") {
        None => None,
        Some(toml::Value::String(s)) => Some(PathBuf::from(s)),
        Some(v) => return Err(CliError::Usage(format!("weights_dir must be a path, got {v}"))),
    };
    debug_assert!(BACKBONE_KEYS.iter().all(|k| !table.contains_key(*k)));
    let trainer: TrainerConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(e.to_string()))?;
    trainer.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(RunConfig {
        trainer,
        backbone,
        layers,
        dim,
        weights_dir,
    })
}

fn build_scorer(cfg: &RunConfig) -> CliResult<CoherenceScorer> {
    let kind = backbone_kind_from_name(&cfg.backbone, TransformerConfig::tiny(cfg.layers, cfg.dim), cfg.weights_dir.clone())?;
    let loaded = make_backbone(&kind)?;
    Ok(match loaded.weights {
        Some(w) => CoherenceScorer::with_encoder(loaded.backbone, w, cfg.trainer.seed),
        None => CoherenceScorer::new(loaded.backbone, cfg.trainer.seed),
    })
}

/// Summary written next to a finished training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub best_dev: Option<f64>,
    pub final_dev: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub best_test_accuracy: Option<f64>,
    pub wall_clock_secs: f64,
}

pub fn train(a: &TrainArgs) -> CliResult<TrainSummary> {
    let out = resolve(&a.out);
    let data = resolve(&a.data);
    let cfg = resolve_config(a.config.as_deref(), &a.overrides, a.seed)?;
    let corpus = load_corpus(&data.join(CORPUS_FILE), CorpusFormat::Jsonl, Split::Train)?.corpus;
    let dataset = read_instances(&data.join(INSTANCES_FILE), &corpus)?;
    let dev = load_eval_pairs(&data.join(DEV_PAIRS_FILE), PairSchema::Generic)?;
    let test_path = data.join(TEST_PAIRS_FILE);
    let test = if test_path.exists() { load_eval_pairs(&test_path, PairSchema::Generic)? } else { Vec::new() };

    let mut manifest = RunManifest::new("train", args_vec(), serde_json::to_value(&cfg).map_err(Error::from)?, vec![cfg.trainer.seed]);
    manifest.add_input(&data)?;
    mkdir(&out)?;
    let mut trainer = match &a.resume {
        Some(dir) => {
            let dir = resolve(dir);
            manifest.add_input(&dir)?;
            let loaded = checkpoint::load(&dir)?;
            if loaded.config != cfg.trainer {
                warn!("resuming with the checkpoint's trainer config; command-line settings ignored");
            }
            loaded.into_trainer(&dataset, &dev)?
        }
        None => Trainer::new(cfg.trainer.clone(), build_scorer(&cfg)?, &dataset, &dev)?,
    };
    trainer = trainer.with_output_dir(&out);
    let best_dev = || trainer_best(&out);
    let (scorer, log) = trainer.finish()?;
    let best = best_dev();
    checkpoint::save_scorer(&out.join("final"), &scorer)?;
    let test_accuracy = if test.is_empty() { None } else { Some(pairwise_accuracy(&scorer, &test, false)?.value) };
    let best_test_accuracy = match (&best, test.is_empty()) {
        (Some(s), false) => Some(pairwise_accuracy(s, &test, false)?.value),
        _ => None,
    };
    let summary = TrainSummary {
        steps: log.steps.len().max(log.steps.last().map_or(0, |s| s.step)),
        best_dev: log.best_eval().map(|e| e.dev_accuracy),
        final_dev: log.evals.last().map(|e| e.dev_accuracy),
        test_accuracy,
        best_test_accuracy,
        wall_clock_secs: log.wall_clock_secs,
    };
    let report = out.join(REPORT_FILE);
    std::fs::write(&report, serde_json::to_string_pretty(&summary).map_err(Error::from)?).map_err(|e| Error::io(&report, e))?;
    manifest.outputs = ["best", "last", "final", "train_log.jsonl", REPORT_FILE]
        .iter()
        .map(|f| out.join(f))
        .collect();
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(summary)
}

fn trainer_best(out: &Path) -> Option<CoherenceScorer> {
    let dir = out.join("best");
    dir.exists().then(|| checkpoint::load_scorer(&dir).ok()).flatten()
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<EvalReport> {
    let out = resolve(&a.out);
    let ckpt = resolve(&a.checkpoint);
    let scorer = checkpoint::load_scorer(&ckpt)?;
    let schema = match a.metric {
        Metric::Accuracy => PairSchema::Generic,
        Metric::Probe => PairSchema::Probes,
        Metric::Alpha => PairSchema::Judgments,
    };
    let pairs = load_eval_pairs(&a.pairs, schema)?;
    let report = match a.metric {
        Metric::Accuracy => pairwise_accuracy(&scorer, &pairs, a.keep_ties)?,
        Metric::Probe => probe_accuracy(&scorer, &pairs)?,
        Metric::Alpha => {
            let mode: AgreementMode = a.agreement.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
            model_agreement(&scorer, &pairs, mode)?
        }
    };
    let name = a.name.clone().unwrap_or_else(|| {
        a.pairs.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    });
    let report = report.with_dataset(name).with_provenance(Provenance {
        checkpoint_hash: Some(sha256_path(&ckpt)?),
        dataset_hash: Some(sha256_path(&a.pairs)?),
        seed: None,
    });
    mkdir(&out)?;
    let json = out.join(REPORT_FILE);
    std::fs::write(&json, serde_json::to_string_pretty(&report).map_err(Error::from)?).map_err(|e| Error::io(&json, e))?;
    let table = out.join("report.txt");
    std::fs::write(&table, report.to_table()).map_err(|e| Error::io(&table, e))?;
    let mut manifest = RunManifest::new("evaluate", args_vec(), serde_json::to_value(a).map_err(Error::from)?, vec![]);
    manifest.add_input(&ckpt)?;
    manifest.add_input(&a.pairs)?;
    manifest.outputs = vec![json, table];
    manifest.write(&out.join(MANIFEST_FILE))?;
    print!("{}", report.to_table());
    Ok(report)
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    id: &'a str,
    score: f64,
}

pub fn score(a: &ScoreArgs) -> CliResult<()> {
    let scorer = checkpoint::load_scorer(&resolve(&a.checkpoint))?;
    let docs = load_corpus(&a.docs, a.format.into(), Split::Test)?.corpus;
    let scores = docs
        .documents
        .par_iter()
        .map(|d| scorer.score(d).map(|s| s.value()))
        .collect::<crate::Result<Vec<f64>>>()?;
    let mut text = String::new();
    for (d, s) in docs.documents.iter().zip(scores) {
        text.push_str(&serde_json::to_string(&ScoreLine { id: &d.id, score: s }).map_err(Error::from)?);
        text.push('\n');
    }
    match &a.out {
        Some(p) => {
            let p = resolve(p);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// One aggregate row of a sweep: a grid point over all seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub seeds: Vec<u64>,
    pub dev_mean: f64,
    pub dev_std: f64,
    pub test_mean: Option<f64>,
    pub test_std: Option<f64>,
    pub failed: usize,
}

fn parse_grid(spec: &str) -> CliResult<(String, Vec<String>)> {
    let (k, vs) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("bad grid {spec:?}, expected key=v1,v2")))?;
    let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(CliError::Usage(format!("grid {k} has no values")));
    }
    Ok((k.trim().to_string(), values))
}

pub fn sweep(a: &SweepArgs) -> CliResult<Vec<SweepRow>> {
    let out = resolve(&a.out);
    let grid = a.grid.iter().map(|g| parse_grid(g)).collect::<CliResult<Vec<_>>>()?;
    if grid.is_empty() {
        return Err(CliError::Usage("at least one --grid is required".into()));
    }
    // validate every combination before launching anything
    for (k, vs) in &grid {
        for v in vs {
            let mut o = a.overrides.clone();
            o.push(format!("{k}={v}"));
            resolve_config(a.config.as_deref(), &o, Some(a.seeds[0]))?;
        }
    }
    let bin = match &a.bin {
        Some(b) => b.clone(),
        None => std::env::current_exe().map_err(|e| Error::io("current_exe", e))?,
    };
    mkdir(&out)?;
    let out_ref = &out;
    let runs: Vec<(String, String, u64, PathBuf)> = grid
        .iter()
        .flat_map(|(k, vs)| {
            vs.iter().flat_map(move |v| {
                a.seeds
                    .iter()
                    .map(move |&s| (k.clone(), v.clone(), s, out_ref.join("runs").join(format!("{k}={v}")).join(format!("seed{s}"))))
            })
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let results: Vec<Option<TrainSummary>> = pool.install(|| {
        runs.par_iter()
            .map(|(k, v, s, dir)| {
                let mut cmd = Command::new(&bin);
                cmd.arg("train").arg("--data").arg(resolve(&a.data)).arg("--out").arg(dir);
                cmd.arg("--seed").arg(s.to_string());
                if let Some(c) = &a.config {
                    cmd.arg("--config").arg(c);
                }
                for o in &a.overrides {
                    cmd.arg("--set").arg(o);
                }
                cmd.arg("--set").arg(format!("{k}={v}"));
                cmd.env_remove(HOME_ENV);
                match cmd.output() {
                    Ok(o) if o.status.success() => std::fs::read_to_string(dir.join(REPORT_FILE))
                        .ok()
                        .and_then(|t| serde_json::from_str(&t).ok()),
                    Ok(o) => {
                        warn!("run {k}={v} seed {s} failed: {}", String::from_utf8_lossy(&o.stderr).trim());
                        None
                    }
                    Err(e) => {
                        warn!("could not start {}: {e}", bin.display());
                        None
                    }
                }
            })
            .collect()
    });

    let mut grouped: BTreeMap<(String, String), Vec<(u64, Option<&TrainSummary>)>> = BTreeMap::new();
    let mut points = Vec::new();
    for ((k, v, s, _), r) in runs.iter().zip(&results) {
        grouped.entry((k.clone(), v.clone())).or_default().push((*s, r.as_ref()));
        let x = v.parse::<f64>().unwrap_or(f64::NAN);
        if x.is_finite() {
            points.push(SweepPoint {
                param: k.clone(),
                value: x,
                test_set: "dev".into(),
                seed: *s,
                metric: r.as_ref().and_then(|r| r.best_dev),
            });
            points.push(SweepPoint {
                param: k.clone(),
                value: x,
                test_set: "test".into(),
                seed: *s,
                metric: r.as_ref().and_then(|r| r.best_test_accuracy),
            });
        }
    }
    let rows: Vec<SweepRow> = grouped
        .into_iter()
        .map(|((param, value), rs)| {
            let dev: Vec<f64> = rs.iter().filter_map(|(_, r)| r.and_then(|r| r.best_dev)).collect();
            let test: Vec<f64> = rs.iter().filter_map(|(_, r)| r.and_then(|r| r.best_test_accuracy)).collect();
            let (dev_mean, dev_std) = if dev.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&dev) };
            let (tm, ts) = if test.is_empty() { (None, None) } else {
                let (m, s) = mean_std(&test);
                (Some(m), Some(s))
            };
            SweepRow {
                param,
                value,
                seeds: rs.iter().map(|(s, _)| *s).collect(),
                dev_mean,
                dev_std,
                test_mean: tm,
                test_std: ts,
                failed: rs.iter().filter(|(_, r)| r.is_none()).count(),
            }
        })
        .collect();
    let mut table = format!("{:<14} {:>10} {:>18} {:>18} {:>6}\n", "param", "value", "dev", "test", "failed");
    for r in &rows {
        let pm = |m: f64, s: f64| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s);
        let test = match (r.test_mean, r.test_std) {
            (Some(m), Some(s)) => pm(m, s),
            _ => "-".into(),
        };
        table.push_str(&format!("{:<14} {:>10} {:>18} {:>18} {:>6}\n", r.param, r.value, pm(r.dev_mean, r.dev_std), test, r.failed));
    }
    let report = out.join("sweep_report.json");
    std::fs::write(&report, serde_json::to_string_pretty(&rows).map_err(Error::from)?).map_err(|e| Error::io(&report, e))?;
    let txt = out.join("sweep.txt");
    std::fs::write(&txt, &table).map_err(|e| Error::io(&txt, e))?;
    let mut outputs = vec![report, txt];
    if !points.is_empty() {
        outputs.extend(sweep_curves(&points, &a.seeds, &out.join("curves"))?);
    }
    let mut manifest = RunManifest::new("sweep", args_vec(), serde_json::to_value(a).map_err(Error::from)?, a.seeds.clone());
    manifest.children = runs.iter().map(|(_, _, _, d)| d.join(MANIFEST_FILE)).collect();
    manifest.outputs = outputs;
    manifest.write(&out.join(MANIFEST_FILE))?;
    print!("{table}");
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(resolve_config(None, &[], None), Err(CliError::Usage(_))));
        let c = resolve_config(None, &[], Some(4)).unwrap();
        assert_eq!(c.trainer.seed, 4);
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 1\nregime = \"contrastive\"\ntau = 0.2\ndim = 16\n").unwrap();
        let c = resolve_config(Some(&p), &["tau=0.3".into(), "regime=pairwise".into(), "negatives=1".into()], None).unwrap();
        assert_eq!(c.trainer.tau, 0.3);
        assert_eq!(c.trainer.regime, crate::trainer::Regime::Pairwise);
        assert_eq!(c.dim, 16);
        assert_eq!(c.trainer.seed, 1);
    }

    #[test]
    fn unknown_keys_fail_fast() {
        let e = resolve_config(None, &["not_a_key=3".into()], Some(1)).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Run(Error::Divergence { step: 1, detail: String::new() }).exit_code(), 3);
        assert_eq!(CliError::Run(Error::Checkpoint(String::new())).exit_code(), 2);
        assert_eq!(CliError::Usage(String::new()).exit_code(), 1);
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("h=10,50").unwrap(), ("h".to_string(), vec!["10".to_string(), "50".to_string()]));
        assert!(parse_grid("h").is_err());
        assert!(parse_grid("h=").is_err());
    }
}
