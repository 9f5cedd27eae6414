//! Command-line entry point for reproducible experiments.
//!
//! Exit codes: 0 success, 1 validation/configuration error, 2 numerical
//! failure (divergence, non-determinism), 3 check-suite failure.

use clap::{Args, Parser, Subcommand};
use ctxdet::config::{ExperimentConfig, Precision};
use ctxdet::detector::Variant;
use ctxdet::error::Error;
use ctxdet::runner::{self, SweepSpec};
use ctxdet::synthdata::Domain;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ctxdet", about = "Few-shot context-attention detection experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (TOML or JSON); flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// baseline | source-only | transformer-only | full | unload-at-test | non-local
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Training shots per target class.
    #[arg(long, global = true)]
    shots: Option<usize>,
    /// Trial index; changes the episode's training shots only.
    #[arg(long, global = true)]
    trial: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// single | double
    #[arg(long, global = true)]
    precision: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source-domain detector from scratch.
    Pretrain,
    /// Fine-tune a variant from a source checkpoint on a few-shot episode.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint on the fixed test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// source | target
        #[arg(long, default_value = "target")]
        domain: String,
    },
    /// Incremental few-shot run: joint source+target head with source replay.
    Incremental {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference verification of all gradients.
    Gradcheck {
        /// Random draws per operation family.
        #[arg(long, default_value_t = 5)]
        draws: usize,
    },
    /// Sweep variants x shots x trials and tabulate target mAP.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated variant names.
        #[arg(long, default_value = "baseline,source-only,transformer-only,full,unload-at-test")]
        variants: String,
        /// Comma-separated shot counts.
        #[arg(long, default_value = "5")]
        sweep_shots: String,
        /// Comma-separated trial indices or an inclusive a..b range.
        #[arg(long, default_value = "1..5")]
        trials: String,
    },
    /// Render scenes to PNG plus a JSON-lines annotation file.
    DumpScenes {
        /// source | target
        #[arg(long, default_value = "source")]
        domain: String,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Emit the top-k attention weights for one prior in one scene.
    DumpAffinity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene_index: u64,
        #[arg(long)]
        prior: usize,
        #[arg(long, default_value_t = 3)]
        top_k: usize,
    },
}

fn parse_domain(s: &str) -> Result<Domain, Error> {
    match s {
        "source" => Ok(Domain::Source),
        "target" => Ok(Domain::Target),
        other => Err(Error::Config(format!(
            "unknown domain {other:?} (expected source or target)"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, Error> {
    s.split(',')
        .map(|part| {
            part.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad {what} entry {part:?}")))
        })
        .collect()
}

fn parse_trials(s: &str) -> Result<Vec<u64>, Error> {
    if let Some((a, b)) = s.split_once("..") {
        let start: u64 = a
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad trial range start {a:?}")))?;
        let end: u64 = b
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad trial range end {b:?}")))?;
        if end < start {
            return Err(Error::Config(format!("empty trial range {s:?}")));
        }
        Ok((start..=end).collect())
    } else {
        parse_list(s, "trial")
    }
}

fn resolve_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(variant) = &common.variant {
        cfg.variant = Variant::parse(variant)?;
    }
    if let Some(shots) = common.shots {
        cfg.shots = shots;
    }
    if let Some(trial) = common.trial {
        cfg.trial = trial;
    }
    if let Some(precision) = &common.precision {
        cfg.precision = Precision::parse(precision)?;
    }
    if common.out.is_some() {
        cfg.out_dir = common.out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::Pretrain => {
            let out = runner::resolve_out_dir(&cfg, cli.common.out, "pretrain");
            let summary = runner::cmd_pretrain(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary).unwrap());
        }
        Command::Finetune { checkpoint } => {
            let out = runner::resolve_out_dir(&cfg, cli.common.out, "finetune");
            let summary = runner::cmd_finetune(&cfg, &checkpoint, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary).unwrap());
        }
        Command::Eval { checkpoint, domain } => {
            let domain = parse_domain(&domain)?;
            let out = cli.common.out.or(cfg.out_dir.clone());
            runner::cmd_eval(&cfg, &checkpoint, domain, out.as_deref())?;
        }
        Command::Incremental { checkpoint } => {
            let out = runner::resolve_out_dir(&cfg, cli.common.out, "incremental");
            runner::cmd_incremental(&cfg, &checkpoint, &out)?;
        }
        Command::Gradcheck { draws } => {
            let (_, all_pass) = runner::cmd_gradcheck(draws)?;
            if !all_pass {
                eprintln!("gradient check failed");
                return Ok(ExitCode::from(3));
            }
        }
        Command::Ablate {
            checkpoint,
            variants,
            sweep_shots,
            trials,
        } => {
            let sweep = SweepSpec {
                variants: variants
                    .split(',')
                    .map(|v| Variant::parse(v.trim()))
                    .collect::<Result<Vec<_>, _>>()?,
                shots: parse_list(&sweep_shots, "shots")?,
                trials: parse_trials(&trials)?,
            };
            let out = runner::resolve_out_dir(&cfg, cli.common.out, "ablate");
            runner::cmd_ablate(&cfg, &checkpoint, &sweep, &out)?;
        }
        Command::DumpScenes { domain, count } => {
            let domain = parse_domain(&domain)?;
            let out = runner::resolve_out_dir(&cfg, cli.common.out, "scenes");
            let summary = runner::cmd_dump_scenes(&cfg, domain, count, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary).unwrap());
        }
        Command::DumpAffinity {
            checkpoint,
            scene_index,
            prior,
            top_k,
        } => {
            runner::cmd_dump_affinity(
                &cfg,
                &checkpoint,
                scene_index,
                prior,
                top_k,
                cli.common.out.as_deref(),
            )?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
