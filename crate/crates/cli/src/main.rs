use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use servib_cli::*;

#[derive(Parser)]
#[command(name = "servib", version, about = "Disentangled speech emotion recognition on synthetic SSL features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; defaults are used for anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (manifest plus feature files).
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the checkpoint, model.json and log.jsonl.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; without it the configured corpus is generated.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cycles: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Score a trained model and write a report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory holding model.serd and model.json.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report file to write.
        #[arg(long)]
        out: PathBuf,
        /// Feed a dead descriptor slot at inference.
        #[arg(long)]
        ablate_descriptor: bool,
        /// Also score each fold of a k-fold split (k from eval.folds unless given).
        #[arg(long, num_args = 0..=1, default_missing_value = "0")]
        folds: Option<usize>,
    },
    /// Train once per beta and tabulate scores and converged KL.
    SweepBeta {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated list, e.g. 1,1e-1,1e-2.
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        #[arg(long)]
        cycles: Option<usize>,
    },
    /// One-tailed paired t-test of a report field (a > b).
    Ttest {
        report_a: PathBuf,
        report_b: PathBuf,
        field: String,
    },
}

fn load(common: &Common, mut overrides: Overrides) -> Result<RunConfig, CliError> {
    overrides.seed = common.seed;
    Ok(RunConfig::load(common.config.as_deref(), &overrides)?)
}

fn limit_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("SER_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("SER_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("SER_THREADS: {e}")))
}

fn write_report(path: &Path, report: &ReportFile) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_owned(), source })?;
    }
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| CliError::Io { path: path.to_owned(), source })
}

fn run(cli: Cli) -> Result<(), CliError> {
    limit_threads()?;
    match cli.command {
        Command::Generate { common, out } => {
            let config = load(&common, Overrides::default())?;
            let corpus = cmd_generate(&config, &out)?;
            print!("{}", corpus_summary(&corpus));
        }
        Command::Train { common, data, out, cycles, beta } => {
            let config = load(&common, Overrides { cycles, beta, ..Overrides::default() })?;
            let outcome = cmd_train(&config, data.as_deref(), &out)?;
            if let Some(last) = outcome.log.last() {
                println!("{} steps, final loss {:.4}", outcome.log.len(), last.loss);
            }
            println!("wrote {}", out.display());
        }
        Command::Evaluate { common, model, data, out, ablate_descriptor, folds } => {
            let k = folds.filter(|&k| k > 0);
            let config = load(&common, Overrides { folds: k, ..Overrides::default() })?;
            let args = EvalArgs { model: &model, data: data.as_deref(), ablate_descriptor, folds: folds.is_some() };
            let report = cmd_evaluate(&config, &args)?;
            write_report(&out, &report)?;
            let r = &report.report;
            println!(
                "n {} UA {:.4} WER {:.4} B@4 {:.4} METEOR {:.4} ROUGE-L {:.4} CIDEr {:.4} unparseable {}",
                r.n, r.ua, r.wer, r.b4, r.meteor, r.rouge_l, r.cider, r.n_unparseable
            );
        }
        Command::SweepBeta { common, data, out, betas, cycles } => {
            let config = load(&common, Overrides { betas, cycles, ..Overrides::default() })?;
            let rows = cmd_sweep_beta(&config, data.as_deref())?;
            write_sweep(&rows, &out)?;
            print!("{}", sweep_table(&rows));
        }
        Command::Ttest { report_a, report_b, field } => {
            let (a, b) = (read_report(&report_a)?, read_report(&report_b)?);
            let t = cmd_ttest(&a, &b, &field)?;
            print!("{}", ttest_text(&field, &t));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
