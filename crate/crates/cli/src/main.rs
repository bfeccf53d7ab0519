use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hvrp_core::error::{Error, Result};
use hvrp_core::harness::{
    build_config, cmd_eval, cmd_generate, cmd_sweep, cmd_train, exit_code, init_threads, parse_config_text, parse_override,
    Baseline, EvalArgs, GenerateArgs, Policy, SweepArgs, TrainArgs,
};
use hvrp_core::io::read_text;

/// Hypergraph-encoded neural solver for the capacitated vehicle routing problem.
#[derive(Parser)]
#[command(name = "hvrp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write random instances.
    Generate {
        #[arg(long, default_value_t = 20)]
        nodes: usize,
        #[arg(long, default_value_t = 30)]
        capacity: u32,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, writing checkpoints and a training log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Model variant: none, no-hypergraph, no-augmentation, no-dual-pointer.
        #[arg(long)]
        ablate: Option<String>,
        /// Continue from a checkpoint; its stored configuration is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint against baselines.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        #[arg(long, default_value = "greedy")]
        policy: String,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        /// Comma-separated list of nn, cw, oracle.
        #[arg(long, default_value = "nn,cw")]
        baselines: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Short training runs over a delta/lambda grid.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Swept key, `delta` or `lambda`; pairs with the next `--values`.
        #[arg(long = "param")]
        params: Vec<String>,
        /// Comma-separated values for the matching `--param`.
        #[arg(long = "values", allow_hyphen_values = true)]
        values: Vec<String>,
        /// Training epochs per cell.
        #[arg(long, default_value_t = 1)]
        budget: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// desk or paper; overrides a preset named in the file.
    #[arg(long)]
    preset: Option<String>,
    /// `key=value` override, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn entries(&self) -> Result<Vec<(String, String)>> {
        let mut entries = match &self.config {
            Some(p) => parse_config_text(&read_text(p)?)?,
            None => Vec::new(),
        };
        if let Some(p) = &self.preset {
            entries.push(("preset".into(), p.clone()));
        }
        for o in &self.overrides {
            entries.push(parse_override(o)?);
        }
        Ok(entries)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn parse_values(key: &str, list: &str) -> Result<Vec<f64>> {
    list.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("bad value `{t}` for `{key}`")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Generate {
            nodes,
            capacity,
            count,
            seed,
            out,
        } => {
            let m = cmd_generate(&GenerateArgs {
                nodes,
                capacity,
                count,
                seed,
                out: out.clone(),
            })?;
            println!("wrote {} instances to {}", m.outputs.len(), out.display());
        }
        Command::Train {
            config,
            ablate,
            resume,
            out,
        } => {
            let mut entries = config.entries()?;
            if let Some(a) = ablate {
                entries.push(("ablation".into(), a));
            }
            let cfg = build_config(&entries)?;
            create_dir(&out)?;
            eprintln!("variant: {}", cfg.model.ablation.as_str());
            let (trainer, _) = cmd_train(
                &TrainArgs {
                    config: cfg,
                    out: out.clone(),
                    resume,
                },
                |s| {
                    eprintln!(
                        "epoch {:>3}  actor {:.4}  baseline {:.4}  p {:.3e}{}  {:.1}s",
                        s.epoch,
                        s.mean_actor_cost,
                        s.mean_baseline_cost,
                        s.ttest_p,
                        if s.baseline_swapped { "  swap" } else { "" },
                        s.wallclock_s
                    )
                },
            )?;
            if let Some(best) = trainer.best_cost {
                println!("best validation cost {best:.6}");
            }
        }
        Command::Eval {
            checkpoint,
            instances,
            policy,
            samples,
            baselines,
            seed,
            out,
        } => {
            create_dir(&out)?;
            let (report, _) = cmd_eval(&EvalArgs {
                checkpoint,
                instances,
                policy: Policy::parse(&policy)?,
                samples,
                baselines: Baseline::parse_list(&baselines)?,
                seed,
                out,
            })?;
            print!("{}", hvrp_core::harness::summary_csv(&report));
        }
        Command::Sweep {
            config,
            params,
            values,
            budget,
            out,
        } => {
            if params.len() != values.len() {
                return Err(Error::Usage(format!(
                    "{} --param flags but {} --values lists",
                    params.len(),
                    values.len()
                )));
            }
            let base = build_config(&config.entries()?)?;
            let (mut deltas, mut lambdas) = (vec![base.model.delta], vec![base.model.lambda]);
            for (p, v) in params.iter().zip(&values) {
                let vals = parse_values(p, v)?;
                match p.as_str() {
                    "delta" => deltas = vals,
                    "lambda" => lambdas = vals,
                    other => return Err(Error::Usage(format!("cannot sweep `{other}` (valid: delta, lambda)"))),
                }
            }
            create_dir(&out)?;
            cmd_sweep(
                &SweepArgs {
                    base,
                    deltas,
                    lambdas,
                    budget,
                    out,
                },
                |r| {
                    eprintln!(
                        "delta {:>6}  lambda {:>4}  cost {:.4}  degree {:.3}",
                        r.delta, r.lambda, r.validation_cost, r.mean_degree
                    )
                },
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
