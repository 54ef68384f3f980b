use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bet_core::analyzer::{self, AnalyzerError, Selection};
use bet_core::bet::DiagPolicy;
use bet_core::harness::{
    self, evaluate, read_text, train, Checkpoint, ConfigFile, Dataset, EvalMetrics, HarnessError, Variant,
};
use bet_core::syntax::{build_hint_targets, parse_treebank};
use clap::{Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "bet", version, about = "Bird-eye transformer language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, loss curve and resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        treebank: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print held-out metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Attention statistics per layer and head.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Stats CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        head: Option<usize>,
        /// Leave row 0 (which always attends only to itself) out of the pools.
        #[arg(long)]
        exclude_first_row: bool,
        #[arg(long, requires = "dump_json")]
        top_k: Option<usize>,
        /// Directory for per-layer top-k JSONL reports.
        #[arg(long, requires = "top_k")]
        dump_json: Option<PathBuf>,
    },
    /// Dump syntax-hint targets, one line per sentence.
    Hints {
        #[arg(long)]
        treebank: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the diagonal-policy grid and compare final metrics.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Harness(HarnessError),
    Analyzer(AnalyzerError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Harness(e) | CliError::Analyzer(AnalyzerError::Harness(e)) => e.exit_code() as u8,
            CliError::Analyzer(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Harness(e) => e.fmt(f),
            CliError::Analyzer(e) => e.fmt(f),
        }
    }
}

impl<E: Into<HarnessError>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Harness(e.into())
    }
}

fn analyzer_err(e: AnalyzerError) -> CliError {
    CliError::Analyzer(e)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| HarnessError::io(path, e).into())
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| HarnessError::io(path, e).into())
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<(harness::ModelConfig, harness::TrainConfig), CliError> {
    let mut doc = ConfigFile::from_json(&read_text(path)?)?;
    if seed.is_some() {
        doc.seed = seed;
    }
    Ok(doc.resolve()?)
}

fn load_dataset(cp: &Checkpoint, corpus: &Path) -> Result<Dataset, CliError> {
    Ok(Dataset::load(&read_text(corpus)?, &cp.vocab, None)?)
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train {
            config,
            corpus,
            treebank,
            out,
            seed,
        } => {
            let (model, train_cfg) = load_config(&config, seed)?;
            let text = read_text(&corpus)?;
            let tb = treebank.as_deref().map(read_text).transpose()?;
            let outcome = train(&model, &train_cfg, &text, tb.as_deref())?;
            outcome.write_to(&out)?;
            if let Some(last) = outcome.curve.last() {
                log::info!("final step {}: total loss {:.6}", last.step, last.total_loss);
            }
        }
        Command::Eval { checkpoint, corpus } => {
            let cp = Checkpoint::load(&checkpoint).map_err(HarnessError::from)?;
            let metrics = evaluate(&cp.model, &load_dataset(&cp, &corpus)?)?;
            println!("{}", serde_json::to_string_pretty(&metrics).map_err(HarnessError::from)?);
        }
        Command::Analyze {
            checkpoint,
            corpus,
            out,
            layer,
            head,
            exclude_first_row,
            top_k,
            dump_json,
        } => {
            let cp = Checkpoint::load(&checkpoint).map_err(HarnessError::from)?;
            let dataset = load_dataset(&cp, &corpus)?;
            let stats = analyzer::corpus_stats(&cp.model, &dataset, Selection { layer, head }, !exclude_first_row)
                .map_err(analyzer_err)?;
            write_file(&out, analyzer::emit_stats_report(&stats))?;
            if let (Some(k), Some(dir)) = (top_k, dump_json) {
                create_dir(&dir)?;
                let reports = analyzer::top_attended_report(&cp.model, &dataset, &cp.vocab, k).map_err(analyzer_err)?;
                for (l, records) in reports.iter().enumerate() {
                    let mut text = String::new();
                    for r in records {
                        text.push_str(&serde_json::to_string(r).map_err(HarnessError::from)?);
                        text.push('\n');
                    }
                    write_file(&dir.join(format!("layer{l}.jsonl")), text)?;
                }
            }
        }
        Command::Hints { treebank, out } => {
            let trees = parse_treebank(&read_text(&treebank)?)?;
            let mut text = String::new();
            for tree in &trees {
                if tree.len() >= 2 {
                    let targets = build_hint_targets(tree)?;
                    let line: Vec<String> = (0..tree.len() - 1)
                        .filter_map(|t| targets.target_index(t))
                        .map(|i| i.to_string())
                        .collect();
                    text.push_str(&line.join(" "));
                }
                text.push('\n');
            }
            write_file(&out, text)?;
        }
        Command::Ablate { config, corpus, out } => ablate(&config, &corpus, &out)?,
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    name: &'static str,
    variant: Variant,
    diag_policy: String,
    final_train_loss: f64,
    cross_entropy_nats: f64,
    perplexity: f64,
    bpc: f64,
}

const GRID: [(&str, Variant, DiagPolicy); 6] = [
    ("standard", Variant::Standard, DiagPolicy::Keep),
    ("reduced_diag", Variant::Standard, DiagPolicy::REDUCED),
    ("magnified_diag", Variant::Standard, DiagPolicy::MAGNIFIED),
    ("diag_free_mask", Variant::Standard, DiagPolicy::MaskOut),
    ("bet_sf", Variant::BetSf, DiagPolicy::MaskOut),
    ("bet_sf_keep_diag", Variant::BetSf, DiagPolicy::Keep),
];

/// Trains every grid variant under the config's seed and evaluates each on
/// the training corpus.
fn ablate(config: &Path, corpus: &Path, out: &Path) -> Result<(), CliError> {
    let (base_model, train_cfg) = load_config(config, None)?;
    let text = read_text(corpus)?;
    create_dir(out)?;
    let mut rows = Vec::new();
    for (name, variant, policy) in GRID {
        let model_cfg = harness::ModelConfig {
            variant,
            diag_policy: policy,
            ..base_model.clone()
        };
        log::info!("ablate: training {name}");
        let outcome = train(&model_cfg, &train_cfg, &text, None)?;
        outcome.write_to(&out.join(name))?;
        let dataset = Dataset::load(&text, &outcome.checkpoint.vocab, None)?;
        let EvalMetrics {
            cross_entropy_nats,
            perplexity,
            bpc,
            ..
        } = evaluate(&outcome.checkpoint.model, &dataset)?;
        rows.push(AblationRow {
            name,
            variant,
            diag_policy: serde_json::to_string(&policy).map_err(HarnessError::from)?,
            final_train_loss: outcome.curve.last().map_or(f64::NAN, |p| p.total_loss),
            cross_entropy_nats,
            perplexity,
            bpc,
        });
    }
    let path = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(HarnessError::from)?;
    for r in &rows {
        w.serialize(r).map_err(HarnessError::from)?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
