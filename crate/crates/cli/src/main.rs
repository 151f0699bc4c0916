use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tlsrec::model::Variant;
use tlsrec::synthetic::{memorization_csv, GateCorpus};
use tlsrec::{Error, Result};
use tlsrec_cli::{ablation_table, cmd_ablate, cmd_eval, cmd_ingest, cmd_inspect, cmd_train, RunConfig};

#[derive(Parser)]
#[command(name = "tlsrec", version, about = "Time-lag aware session recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a raw log into sessions and padded instances.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Override `dataset.path`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train one variant and keep the best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Rank all items for every instance of a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated cutoffs, e.g. `20,30`.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Train and evaluate several variants with a shared seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variant names.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Export attention, pooling and gate CSVs for selected instances.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        user: Option<String>,
        #[arg(long)]
        index: Option<usize>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Write one of the built-in synthetic logs as CSV.
    Generate {
        /// `memorization` or `gate`.
        kind: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(dir) = &common.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(seed) = common.seed {
        config.train.seed = seed;
    }
    Ok(config)
}

fn epoch_line(prefix: &str, r: &tlsrec::training::EpochRecord) {
    eprintln!(
        "{prefix}epoch {:>4}  loss {:>12.4}  val_hit {:.4}  val_map {:.4}  {:>8.1}s",
        r.epoch, r.train_loss, r.val_hit, r.val_map, r.wall_seconds
    );
}

fn show(paths: &[&Path]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { common, input } => {
            let mut config = load(&common)?;
            if input.is_some() {
                config.dataset.path = input;
            }
            let report = cmd_ingest(&config)?;
            println!("{report}");
            show(&[&config.instances_path()]);
        }
        Command::Train {
            common,
            variant,
            epochs,
        } => {
            let mut config = load(&common)?;
            if let Some(v) = variant {
                config.model.variant = v.parse()?;
            }
            if let Some(e) = epochs {
                config.train.epochs = e;
            }
            let quiet = common.quiet;
            let summary = cmd_train(&config, &mut |r| {
                if !quiet {
                    epoch_line("", r)
                }
            })?;
            println!("best epoch {} of {}", summary.best_epoch, summary.log.len());
            show(&[&config.checkpoint_path()]);
        }
        Command::Eval {
            common,
            checkpoint,
            k,
            split,
        } => {
            let mut config = load(&common)?;
            if let Some(k) = k {
                config.eval.ks = k;
            }
            if let Some(s) = split {
                config.eval.split = s;
            }
            let report = cmd_eval(&config, checkpoint.as_deref())?;
            print!("{}", report.table());
        }
        Command::Ablate {
            common,
            variants,
            epochs,
        } => {
            let mut config = load(&common)?;
            if let Some(v) = variants {
                config.ablate.variants = v.iter().map(|s| s.parse()).collect::<Result<Vec<Variant>>>()?;
            }
            if let Some(e) = epochs {
                config.train.epochs = e;
            }
            let quiet = common.quiet;
            let rows = cmd_ablate(&config, &mut |v, r| {
                if !quiet {
                    epoch_line(&format!("[{}] ", v.label()), r)
                }
            })?;
            print!("{}", ablation_table(&rows));
        }
        Command::Inspect {
            common,
            checkpoint,
            user,
            index,
            split,
        } => {
            let mut config = load(&common)?;
            if user.is_some() {
                config.inspect.user = user;
            }
            if index.is_some() {
                config.inspect.index = index;
            }
            if split.is_some() {
                config.inspect.split = split;
            }
            let written = cmd_inspect(&config, checkpoint.as_deref())?;
            show(&written.iter().map(PathBuf::as_path).collect::<Vec<_>>());
        }
        Command::Generate { kind, out, seed } => {
            let csv = match kind.as_str() {
                "memorization" => memorization_csv(20),
                "gate" => GateCorpus {
                    seed,
                    ..GateCorpus::default()
                }
                .csv(),
                other => {
                    return Err(Error::Config(format!(
                        "unknown corpus {other:?}; expected memorization or gate"
                    )))
                }
            };
            std::fs::write(&out, csv).map_err(|e| Error::io(&out, e))?;
            show(&[&out]);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::FAILURE
        }
    }
}
