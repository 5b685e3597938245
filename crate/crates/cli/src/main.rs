//! Command-line harness: training, evaluation, ablations, ratio sweeps,
//! diagnostics emission, and the scripted benchmark suite.
//!
//! Exit codes: 0 on success, 1 for configuration errors (bad flags, bad
//! config file, invalid field values), 2 for runtime errors.

use clap::{Args, Parser, Subcommand};
use metagsnr::bench::{run_bench, BenchManifest};
use metagsnr::config::{Mode, Overrides, RunConfig};
use metagsnr::data::{make_split, epoch_order};
use metagsnr::diagnostics::{emit, track_epoch, EpochInputs, RunRecord};
use metagsnr::error::Error;
use metagsnr::masking::Criterion;
use metagsnr::train::{
    cmd_ablate, cmd_eval, cmd_sweep_p, cmd_train, load_dataset, AblateCell, Checkpoint,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "metagsnr", about = "GSNR-guided dropout experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags mirroring the run-config fields; flags win over the config file,
/// the file over defaults.
#[derive(Args, Clone)]
struct ConfigFlags {
    /// TOML run-config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ingest a dataset from disk instead of generating one.
    #[arg(long)]
    ingest: Option<PathBuf>,
    #[arg(long)]
    target_domain: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long, value_enum)]
    criterion: Option<Criterion>,
    #[arg(long)]
    meta: Option<bool>,
    #[arg(long)]
    candidate_fraction: Option<f64>,
    #[arg(long)]
    p_gsnr: Option<f64>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lr_decay_epoch: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha_init: Option<f64>,
    #[arg(long)]
    mtr_fraction: Option<f64>,
    #[arg(long)]
    k_mte: Option<usize>,
    #[arg(long)]
    second_order: Option<bool>,
    #[arg(long)]
    augment: Option<bool>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Root for default output directories.
    #[arg(long, env = "METAGSNR_OUTPUT_ROOT")]
    output_root: Option<String>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<(RunConfig, PathBuf), Error> {
        let base = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let o = Overrides {
            target_domain: self.target_domain,
            seed: self.seed,
            mode: self.mode,
            criterion: self.criterion,
            meta: self.meta,
            candidate_fraction: self.candidate_fraction,
            p_gsnr: self.p_gsnr,
            block_size: self.block_size,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_decay_epoch: self.lr_decay_epoch,
            gamma: self.gamma,
            beta: self.beta,
            alpha_init: self.alpha_init,
            mtr_fraction: self.mtr_fraction,
            k_mte: self.k_mte,
            second_order: self.second_order,
            augment: self.augment,
            output_dir: self.output_dir.clone(),
            ingest: self.ingest.clone(),
        };
        let cfg = base.apply(&o).resolve()?;
        let out = cfg.resolved_output_dir(self.output_root.as_deref());
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one leave-one-out run; writes metrics, checkpoint, and the
    /// resolved config.
    Train {
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Evaluate a checkpoint (inference mode, identity masks).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Restrict to one domain; defaults to the whole dataset.
        #[arg(long)]
        domain: Option<usize>,
    },
    /// Run a {mode} x {criterion} x {meta} matrix over seeds.
    Ablate {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Modes to cross, comma-separated.
        #[arg(long, value_delimiter = ',', default_value = "dropout,dropblock")]
        modes: Vec<Mode>,
        /// Criteria to cross, comma-separated.
        #[arg(long, value_delimiter = ',', default_value = "random,gsnr")]
        criteria: Vec<Criterion>,
        /// Meta settings to cross, comma-separated.
        #[arg(long, value_delimiter = ',', default_value = "false")]
        meta_axis: Vec<bool>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Sweep per-block drop ratios; grid points separated by ';', per-block
    /// ratios within a point by ','.
    SweepP {
        #[command(flatten)]
        flags: ConfigFlags,
        #[arg(long)]
        grid: String,
        /// Maximum number of runs.
        #[arg(long, default_value_t = 32)]
        budget: usize,
    },
    /// Recompute diagnostics (GSNR, stiffness, OSGR, accuracies) for a
    /// checkpoint and emit them.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long, env = "METAGSNR_OUTPUT_ROOT")]
        output_root: Option<String>,
    },
    /// Scripted benchmark suite.
    Bench {
        #[command(subcommand)]
        action: BenchAction,
    },
}

#[derive(Subcommand)]
enum BenchAction {
    /// Execute every entry of a manifest and print the summary table.
    Run { manifest: PathBuf },
}

/// Errors surfaced while building the configuration (exit 1) as opposed to
/// executing the run (exit 2).
enum CliError {
    Config(Error),
    Runtime(Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Config(e) => format!("configuration error: {e}"),
            CliError::Runtime(e) => format!("error: {e}"),
        }
    }
}

fn parse_grid(text: &str, blocks: usize) -> Result<Vec<Vec<f64>>, Error> {
    let mut grid = Vec::new();
    for point in text.split(';').filter(|s| !s.trim().is_empty()) {
        let ratios: Vec<f64> = point
            .split(',')
            .map(|v| {
                v.trim().parse::<f64>().map_err(|_| Error::Config {
                    field: "grid".into(),
                    detail: format!("`{v}` is not a number"),
                })
            })
            .collect::<Result<_, _>>()?;
        let ratios = if ratios.len() == 1 {
            vec![ratios[0]; blocks]
        } else {
            ratios
        };
        if ratios.len() != blocks {
            return Err(Error::Config {
                field: "grid".into(),
                detail: format!("point `{point}` has {} ratios for {blocks} blocks", ratios.len()),
            });
        }
        grid.push(ratios);
    }
    if grid.is_empty() {
        return Err(Error::Config {
            field: "grid".into(),
            detail: "no grid points".into(),
        });
    }
    Ok(grid)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { flags } => {
            let (cfg, out) = flags.resolve().map_err(CliError::Config)?;
            let result = cmd_train(&cfg, &out).map_err(CliError::Runtime)?;
            let last = result.record.entries.last();
            println!("run {} finished ({} epochs)", result.record.run_id, result.record.entries.len());
            if let Some(e) = last {
                println!(
                    "final: train loss {:.4}, val acc {}, target acc {}",
                    e.train_loss.unwrap_or(f64::NAN),
                    e.val_accuracy.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                    e.target_accuracy.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                );
            }
            println!("artifacts in {}", out.display());
            Ok(())
        }
        Command::Eval { checkpoint, domain } => {
            let report = cmd_eval(&checkpoint, domain).map_err(CliError::Runtime)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(
                    Error::Parse {
                        context: "eval report".into(),
                        detail: e.to_string()
                    }
                ))?
            );
            Ok(())
        }
        Command::Ablate {
            flags,
            modes,
            criteria,
            meta_axis,
            seeds,
        } => {
            let (base, _) = flags.resolve().map_err(CliError::Config)?;
            let mut cells = Vec::new();
            for &mode in &modes {
                for &criterion in &criteria {
                    for &meta in &meta_axis {
                        let cfg = RunConfig {
                            mode,
                            criterion,
                            meta,
                            ..base.clone()
                        }
                        .resolve()
                        .map_err(CliError::Config)?;
                        cells.push(AblateCell {
                            label: format!(
                                "{mode}-{criterion:?}-meta{}",
                                if meta { "on" } else { "off" }
                            )
                            .to_lowercase(),
                            cfg,
                        });
                    }
                }
            }
            let mut rows = cmd_ablate(&cells, &seeds).map_err(CliError::Runtime)?;
            rows.sort_by(|a, b| b.mean.partial_cmp(&a.mean).unwrap());
            println!("{:<32} {:>8} {:>8}  runs", "cell", "mean", "std");
            for r in &rows {
                println!(
                    "{:<32} {:>8.4} {:>8.4}  {}{}",
                    r.label,
                    r.mean,
                    r.std,
                    r.accuracies.len(),
                    if r.failures.is_empty() {
                        String::new()
                    } else {
                        format!(" ({} failed)", r.failures.len())
                    }
                );
                for (seed, msg) in &r.failures {
                    println!("    seed {seed} failed: {msg}");
                }
            }
            println!("ordering: {}", rows.iter().map(|r| r.label.as_str()).collect::<Vec<_>>().join(" > "));
            Ok(())
        }
        Command::SweepP {
            flags,
            grid,
            budget,
        } => {
            let (cfg, out) = flags.resolve().map_err(CliError::Config)?;
            let grid = parse_grid(&grid, cfg.net.num_blocks()).map_err(CliError::Config)?;
            let (rows, truncated) = cmd_sweep_p(&cfg, &grid, budget).map_err(CliError::Runtime)?;
            if truncated {
                eprintln!("warning: grid truncated to budget of {budget} runs");
            }
            std::fs::create_dir_all(&out)
                .map_err(|e| CliError::Runtime(Error::io(out.display().to_string(), e)))?;
            let csv_path = out.join("sweep_p.csv");
            let mut csv = String::from("p_per_block,target_accuracy\n");
            println!("{:<24} target accuracy", "p per block");
            for r in &rows {
                let ps = r
                    .p_per_block
                    .iter()
                    .map(|p| p.to_string())
                    .collect::<Vec<_>>()
                    .join("|");
                csv.push_str(&format!("{ps},{}\n", r.target_accuracy));
                println!("{:<24} {:.4}", ps, r.target_accuracy);
            }
            let best = rows.iter().max_by(|a, b| a.target_accuracy.partial_cmp(&b.target_accuracy).unwrap());
            let worst = rows.iter().min_by(|a, b| a.target_accuracy.partial_cmp(&b.target_accuracy).unwrap());
            if let (Some(b), Some(w)) = (best, worst) {
                println!("best {:?} ({:.4}), worst {:?} ({:.4})", b.p_per_block, b.target_accuracy, w.p_per_block, w.target_accuracy);
            }
            std::fs::write(&csv_path, csv)
                .map_err(|e| CliError::Runtime(Error::io(csv_path.display().to_string(), e)))?;
            Ok(())
        }
        Command::Diagnose {
            checkpoint,
            output_dir,
            output_root,
        } => {
            let ckpt = Checkpoint::load(&checkpoint).map_err(CliError::Runtime)?;
            let cfg = ckpt.config.clone();
            let out = match output_dir {
                Some(d) => d,
                None => cfg.resolved_output_dir(output_root.as_deref()).join("diagnose"),
            };
            let ds = load_dataset(&cfg).map_err(CliError::Runtime)?;
            let split = make_split(&ds, cfg.target_domain, cfg.seed).map_err(CliError::Runtime)?;
            let probe_idx: Vec<usize> = epoch_order(&split.train_idx, cfg.seed, u64::MAX)
                .into_iter()
                .take(32)
                .collect();
            let run = (|| {
                let probe = ds.batch(&probe_idx)?;
                let val: Vec<_> = split
                    .val_idx
                    .chunks(cfg.batch_size)
                    .map(|c| ds.batch(c))
                    .collect::<Result<_, _>>()?;
                let target: Vec<_> = split
                    .target_idx
                    .chunks(cfg.batch_size)
                    .map(|c| ds.batch(c))
                    .collect::<Result<_, _>>()?;
                let entry = track_epoch(
                    ckpt.state.net(),
                    EpochInputs {
                        epoch: 0,
                        train_loss: None,
                        val: &val,
                        target: &target,
                        probe: Some(&probe),
                        p_per_block: match &ckpt.state {
                            metagsnr::train::TrainedState::Meta { state } => {
                                Some(state.p_per_block.clone())
                            }
                            _ => None,
                        },
                        drop_fractions: None,
                        seed: cfg.seed,
                        osgr_n: split.train_idx.len(),
                    },
                )?;
                let mut record = RunRecord::new(
                    format!("{}-diagnose", cfg.run_id()),
                    cfg.seed,
                    serde_json::to_value(&cfg).map_err(|e| Error::Parse {
                        context: "config".into(),
                        detail: e.to_string(),
                    })?,
                );
                record.push(entry.clone())?;
                emit(&record, &out)?;
                Ok::<_, Error>(entry)
            })()
            .map_err(CliError::Runtime)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&run).map_err(|e| CliError::Runtime(Error::Parse {
                    context: "diagnose output".into(),
                    detail: e.to_string()
                }))?
            );
            println!("diagnostics written to {}", out.display());
            Ok(())
        }
        Command::Bench { action } => match action {
            BenchAction::Run { manifest } => {
                let m = BenchManifest::from_file(&manifest).map_err(CliError::Config)?;
                let report = run_bench(&m);
                print!("{}", report.table());
                if report.all_passed() {
                    Ok(())
                } else {
                    Err(CliError::Runtime(Error::InvalidArg(
                        "one or more bench entries failed".into(),
                    )))
                }
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not errors
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.message());
            ExitCode::from(e.code())
        }
    }
}
