use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ckf::cli::{self, Config};
use ckf::corpus::synthetic::SyntheticSpec;
use ckf::error::{CkfError, Result};

#[derive(Parser)]
#[command(name = "ckf", version, about = "Collaborative-knowledge fusion recommender pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; omitted sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for corpus sampling, CF and LM training.
    #[arg(long)]
    seed: Option<u64>,
    /// Work directory holding every artifact.
    #[arg(long, default_value = "work")]
    out: PathBuf,
    /// Override a config field, e.g. `--set train.epochs=1`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Filter and split an interaction log into OUT/corpus.
    BuildCorpus {
        #[command(flatten)]
        common: Common,
        /// Interaction file (overrides corpus.input).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Titles file (overrides corpus.items).
        #[arg(long)]
        items: Option<PathBuf>,
    },
    /// Train the collaborative-filtering tables.
    TrainCf {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune adapters and fusion networks.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score the test partition and write metrics.json.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Write projected user and item vectors as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic two-genre corpus in ml-dat format.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 100)]
        items: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(c: &Common) -> Result<Config> {
    let base = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let cfg = base.with_overrides(&c.sets)?;
    Ok(match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildCorpus { common, input, items } => {
            let mut cfg = load_config(&common)?;
            if input.is_some() {
                cfg.corpus.input = input;
            }
            if items.is_some() {
                cfg.corpus.items = items;
            }
            let stats = cli::cmd_build_corpus(&cfg, &common.out)?;
            println!("{stats}");
        }
        Command::TrainCf { common } => {
            let losses = cli::cmd_train_cf(&load_config(&common)?, &common.out)?;
            if let Some(l) = losses.last() {
                println!("cf final loss {l:.6}");
            }
        }
        Command::Train { common } => {
            let report = cli::cmd_train(&load_config(&common)?, &common.out)?;
            for e in &report.epochs {
                match e.valid_loss {
                    Some(v) => println!("epoch {} train {:.6} valid {:.6}", e.epoch, e.train_loss, v),
                    None => println!("epoch {} train {:.6}", e.epoch, e.train_loss),
                }
            }
            println!("kept epoch {} after {} steps", report.best_epoch, report.steps);
        }
        Command::Evaluate { common } => {
            let report = cli::cmd_evaluate(&load_config(&common)?, &common.out)?;
            print!("{}", serde_json::to_string_pretty(&report.tasks)? + "\n");
        }
        Command::ExportEmbeddings { common } => {
            let (u, i) = cli::cmd_export_embeddings(&load_config(&common)?, &common.out)?;
            println!("{}\n{}", u.display(), i.display());
        }
        Command::GenSynthetic {
            out,
            users,
            items,
            seed,
        } => {
            let spec = SyntheticSpec {
                users,
                items,
                seed,
                ..SyntheticSpec::default()
            };
            let (r, m) = cli::cmd_gen_synthetic(&spec, &out)?;
            println!("{}\n{}", r.display(), m.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CkfError::exit_code(&e) as u8)
        }
    }
}
