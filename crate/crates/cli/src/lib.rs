//! Command implementations behind the `servib` binary.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use servib::datagen::{generate_corpus, read_dataset, split_folds, write_dataset, DataError, Utterance};
use servib::metrics::{evaluate_corpus, fold_scores, paired_t_test, MetricError, MetricReport, TTest};
use servib::model::{ModelError, SerModel};
use servib::trainer::{self, log_jsonl, predict, sweep_beta, SweepRow, TrainError};

pub use config::{ConfigError, EvalConfig, Overrides, RunConfig};

pub const CONFIG_ECHO: &str = "config.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const SWEEP_JSON: &str = "sweep.json";
pub const SWEEP_TABLE: &str = "sweep.txt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Train(TrainError::Config(_)) | CliError::Metric(MetricError::UnknownField(_)) => 2,
            CliError::Metric(_) | CliError::Train(TrainError::Metric(_)) => 3,
            CliError::Train(TrainError::Divergence { .. }) => 4,
            _ => 1,
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io { path: path.to_owned(), source })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Io { path: path.to_owned(), source })
}

/// Reads `data` when given, otherwise generates the configured corpus.
pub fn load_corpus(config: &RunConfig, data: Option<&Path>) -> Result<Vec<Utterance>, CliError> {
    match data {
        Some(dir) => Ok(read_dataset(dir)?),
        None => generate_corpus(&config.corpus_spec()).map_err(|e| ConfigError::Invalid(format!("data: {e}")).into()),
    }
}

/// Class histogram and token counts, one item per line.
pub fn corpus_summary(corpus: &[Utterance]) -> String {
    let mut hist: BTreeMap<String, usize> = BTreeMap::new();
    for u in corpus {
        *hist.entry(u.emotion.to_string()).or_default() += 1;
    }
    let transcript: usize = corpus.iter().map(|u| u.transcript.len()).sum();
    let caption: usize = corpus.iter().map(|u| u.descriptor_caption.len()).sum();
    let mut out = format!("utterances {}\n", corpus.len());
    for (class, n) in &hist {
        out += &format!("  {class:<10} {n}\n");
    }
    out += &format!("transcript tokens {transcript}\ncaption tokens {caption}\n");
    out
}

pub fn cmd_generate(config: &RunConfig, out: &Path) -> Result<Vec<Utterance>, CliError> {
    let corpus = load_corpus(config, None)?;
    write_dataset(&corpus, out)?;
    write(&out.join(CONFIG_ECHO), config.echo())?;
    Ok(corpus)
}

pub fn cmd_train(config: &RunConfig, data: Option<&Path>, out: &Path) -> Result<trainer::TrainOutcome, CliError> {
    let corpus = load_corpus(config, data)?;
    create_dir(out)?;
    write(&out.join(CONFIG_ECHO), config.echo())?;
    let model = SerModel::for_corpus(config.model.clone(), &corpus, config.seed)?;
    let outcome = trainer::train(&config.train_config(), model, &corpus)?;
    outcome.model.save(out)?;
    write(&out.join(LOG_FILE), log_jsonl(&outcome.log))?;
    Ok(outcome)
}

/// What `evaluate` writes: the report plus the settings that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub config: RunConfig,
    pub seed: u64,
    pub ablate_descriptor: bool,
    #[serde(flatten)]
    pub report: MetricReport,
}

pub struct EvalArgs<'a> {
    pub model: &'a Path,
    pub data: Option<&'a Path>,
    pub ablate_descriptor: bool,
    /// Adds per-fold scores over a seeded split of the evaluated corpus.
    pub folds: bool,
}

pub fn cmd_evaluate(config: &RunConfig, args: &EvalArgs<'_>) -> Result<ReportFile, CliError> {
    let model = SerModel::load(args.model)?;
    let corpus = load_corpus(config, args.data)?;
    let responses = predict(&model, &corpus, args.ablate_descriptor)?;
    let mut report = evaluate_corpus(&responses, &corpus)?;
    if args.folds {
        let folds = split_folds(&corpus, config.eval.folds, config.seed)
            .map_err(|e| ConfigError::Invalid(format!("eval.folds: {e}")))?;
        report.folds = fold_scores(&responses, &corpus, &folds)?;
    }
    let mut echo = config.clone();
    echo.model = model.config.clone();
    Ok(ReportFile { config: echo, seed: config.seed, ablate_descriptor: args.ablate_descriptor, report })
}

pub fn read_report(path: &Path) -> Result<ReportFile, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_owned(), source })?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.to_owned(), source })
}

/// Trains on all folds but the first and scores the first, once per beta.
pub fn cmd_sweep_beta(config: &RunConfig, data: Option<&Path>) -> Result<Vec<SweepRow>, CliError> {
    let corpus = load_corpus(config, data)?;
    let folds = split_folds(&corpus, config.eval.folds, config.seed)
        .map_err(|e| ConfigError::Invalid(format!("eval.folds: {e}")))?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>();
    let (train_set, eval_set) = (pick(&folds[0].train), pick(&folds[0].test));
    Ok(sweep_beta(&config.model, &config.train_config(), &config.eval.betas, &train_set, &eval_set)?)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let head = ["beta", "UA", "WER", "B@4", "METEOR", "ROUGE-L", "CIDEr", "KL_con", "KL_des", "mean KL"];
    let mut out = head.iter().map(|h| format!("{h:>9}")).collect::<Vec<_>>().join(" ");
    out.push('\n');
    for r in rows {
        let cells = [
            format!("{:>9.0e}", r.beta),
            format!("{:>9.4}", r.ua),
            format!("{:>9.4}", r.wer),
            format!("{:>9.4}", r.b4),
            format!("{:>9.4}", r.meteor),
            format!("{:>9.4}", r.rouge_l),
            format!("{:>9.4}", r.cider),
            format!("{:>9.4}", r.kl_con),
            format!("{:>9.4}", r.kl_des),
            format!("{:>9.4}", r.mean_kl),
        ];
        out += &cells.join(" ");
        out.push('\n');
    }
    out
}

pub fn write_sweep(rows: &[SweepRow], out: &Path) -> Result<(), CliError> {
    create_dir(out)?;
    let mut json = serde_json::to_string_pretty(rows).expect("sweep rows serialize");
    json.push('\n');
    write(&out.join(SWEEP_JSON), json)?;
    write(&out.join(SWEEP_TABLE), sweep_table(rows))
}

/// Paired test of `field` between two report files. Per-fold scores are
/// used when both reports have them; otherwise per-utterance scores, which
/// must cover the same utterances.
pub fn cmd_ttest(a: &ReportFile, b: &ReportFile, field: &str) -> Result<TTest, CliError> {
    let (ra, rb) = (&a.report, &b.report);
    if ra.folds.is_empty() != rb.folds.is_empty() {
        return Err(CliError::Usage("one report has per-fold scores and the other does not".into()));
    }
    if ra.folds.is_empty() {
        for (i, (x, y)) in ra.per_utterance.iter().zip(&rb.per_utterance).enumerate() {
            if x.id != y.id {
                return Err(MetricError::IdMismatch { index: i, expected: x.id.clone(), got: y.id.clone() }.into());
            }
        }
    }
    Ok(paired_t_test(&ra.samples(field)?, &rb.samples(field)?)?)
}

pub fn ttest_text(field: &str, t: &TTest) -> String {
    let verdict = if t.significant { "significant" } else { "not significant" };
    format!("field {field}: t = {:.4}, df = {}, p = {:.4} (one-tailed), {verdict} at 0.05\n", t.t, t.df, t.p)
}
