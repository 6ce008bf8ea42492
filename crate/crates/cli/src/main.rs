use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use zsrte::commands::{cmd_eval, cmd_predict, cmd_split, cmd_train, parse_overrides, write_records, EvalRequest, PredictRequest};
use zsrte::config::RunConfig;
use zsrte::corpus::write_jsonl;
use zsrte::synth::{builtin_templates, generate, heldout_templates, seen_templates};
use zsrte::Execution;

/// Zero-shot relation triplet extraction.
#[derive(Parser)]
#[command(name = "zsrte", version, about)]
struct Cli {
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut zero-shot folds and write their manifests.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        /// Unseen relations per fold.
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        /// One seed per fold, comma separated. Defaults to 0..folds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Directory for fold-{k}.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on one fold and save the best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score checkpoints on the test partition of their folds.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
        /// Replace the selector with uniform random probabilities.
        #[arg(long, value_name = "SEED")]
        random_selector: Option<u64>,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Extract triplets from raw sentences.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL with `tokens`, `words` or `text` per line.
        #[arg(long)]
        input: PathBuf,
        /// Candidate relations, one per line.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Output JSONL; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write attention maps as JSON here.
        #[arg(long)]
        attention: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write a templated synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0.3)]
        multi_fraction: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = TemplateSet::All)]
        templates: TemplateSet,
    },
}

#[derive(Args)]
struct Overrides {
    /// Override a configuration key, e.g. --set alpha=0.5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TemplateSet {
    All,
    Seen,
    Heldout,
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let execution = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Split {
            corpus,
            m,
            folds,
            seeds,
            out,
        } => {
            let seeds = if seeds.is_empty() {
                (0..folds as u64).collect()
            } else if seeds.len() != folds {
                bail!("{} seeds given for {folds} folds", seeds.len());
            } else {
                seeds
            };
            for path in cmd_split(&corpus, &out, m, &seeds)? {
                println!("{}", path.display());
            }
        }
        Command::Train {
            config,
            fold,
            overrides,
        } => {
            let mut cfg = RunConfig::from_file(&config)?;
            for (k, v) in parse_overrides(&overrides.set)? {
                cfg.set(&k, &v)?;
            }
            let state = cmd_train(&cfg, fold, execution)?;
            println!(
                "best epoch {} validation score {:.4}{}",
                state.best_epoch,
                state.best_score,
                if state.stopped_early { " (stopped early)" } else { "" }
            );
        }
        Command::Eval {
            checkpoints,
            fold,
            random_selector,
            out,
            overrides,
        } => {
            let overrides = parse_overrides(&overrides.set)?;
            let summary = cmd_eval(&EvalRequest {
                checkpoints: &checkpoints,
                fold,
                overrides: &overrides,
                random_selector,
                output: &out,
                execution,
            })?;
            print!("{}", summary.table());
        }
        Command::Predict {
            checkpoint,
            input,
            labels,
            output,
            attention,
            overrides,
        } => {
            let overrides = parse_overrides(&overrides.set)?;
            let result = cmd_predict(
                &PredictRequest {
                    checkpoint: &checkpoint,
                    overrides: &overrides,
                    input: &input,
                    labels: labels.as_deref(),
                    execution,
                },
                attention.is_some(),
            )?;
            match output {
                Some(path) => {
                    let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                    write_records(BufWriter::new(file), &result.records)?;
                }
                None => write_records(io::stdout().lock(), &result.records)?,
            }
            if let Some(path) = attention {
                let mut file = BufWriter::new(
                    fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?,
                );
                serde_json::to_writer(&mut file, &result.attention)?;
                file.flush()?;
            }
        }
        Command::Synth {
            out,
            count,
            multi_fraction,
            seed,
            templates,
        } => {
            let templates = match templates {
                TemplateSet::All => builtin_templates(),
                TemplateSet::Seen => seen_templates(),
                TemplateSet::Heldout => heldout_templates(),
            };
            let data = generate(&templates, count, multi_fraction, &mut ChaCha8Rng::seed_from_u64(seed))?;
            write_jsonl(&out, &data)?;
            println!("{} sentences written to {}", data.len(), out.display());
        }
    }
    Ok(())
}
