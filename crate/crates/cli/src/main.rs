//! `fedmerge` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fedmerge_core::analysis::{weights_export, write_weights_csv};
use fedmerge_core::experiment::{
    ablate_fixed, generate_federation, run_descent, run_experiment, ExperimentConfig, ENV_THREADS,
};
use fedmerge_core::gradcheck::{run_gradcheck, Formula, GradcheckOptions, TOLERANCE};

#[derive(Parser)]
#[command(name = "fedmerge", version, about = "Federated model-soup merging simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, env = ENV_THREADS)]
    threads: Option<usize>,
    /// Output directory (overrides the config and the environment).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(&self.config)
            .with_context(|| format!("cannot read {}", self.config.display()))?;
        let mut cfg = ExperimentConfig::from_json(&text)?;
        cfg.apply_env();
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured method over every seed and write metrics.
    Run(Common),
    /// Compare every analytic gradient with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 4)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long, default_value_t = 3)]
        d: usize,
        /// Negate one formula's analytic value (control run).
        #[arg(long, value_name = "FORMULA")]
        inject_fault: Option<String>,
        #[arg(long, env = ENV_THREADS)]
        threads: Option<usize>,
    },
    /// Print a merge-weight snapshot and its block-structure score.
    WeightsExport {
        /// Per-seed run directory.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        round: usize,
        /// Copy the matrix to this CSV file instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dynamic weights versus frozen uniform weights over random subsets.
    AblateFixed {
        #[command(flatten)]
        common: Common,
        /// Comma-separated fractions of the soup per client.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0 / 6.0, 1.0 / 3.0, 0.5, 1.0])]
        fractions: Vec<f64>,
    },
    /// Smoothness estimate and per-round descent check with exact gradients.
    Descent {
        #[command(flatten)]
        common: Common,
        /// Soup size (defaults to the config).
        #[arg(long)]
        d: Option<usize>,
        /// Step size as a multiple of 1 / L_hat.
        #[arg(long)]
        eta_ratio: Option<f64>,
    },
    /// Write the configured federation as per-client CSV files.
    GenData(Common),
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value)?)?;
    Ok(path)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run(common) => {
            let cfg = common.load()?;
            let outcome = run_experiment(&cfg, common.threads)?;
            for r in &outcome.runs {
                println!(
                    "seed {}: best round {} test acc {:.4} (final {:.4})",
                    r.seed, r.summary.best_round, r.summary.test_acc, r.summary.final_test_acc
                );
            }
            let s = &outcome.summary;
            println!(
                "{}: test acc {:.4} ± {:.4} over {} seeds",
                s.method,
                s.test_acc.mean,
                s.test_acc.std,
                s.seeds.len()
            );
            println!("wrote {}", cfg.output_dir.join("summary.json").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            instances,
            seed,
            m,
            d,
            inject_fault,
            threads,
        } => {
            let fault = match inject_fault {
                None => None,
                Some(name) => match Formula::from_name(&name) {
                    Some(f) => Some(f),
                    None => {
                        let names: Vec<_> = Formula::ALL.iter().map(|f| f.name()).collect();
                        bail!("unknown formula `{name}`; expected one of {}", names.join(", "));
                    }
                },
            };
            let opts = GradcheckOptions {
                instances,
                m,
                d,
                seed,
                fault,
            };
            let report = fedmerge_core::experiment::with_threads(threads, || run_gradcheck(&opts))??;
            for r in &report.results {
                println!(
                    "{:<30} worst rel err {:.3e}  P<={:<3} {}",
                    r.formula.name(),
                    r.worst_rel_err,
                    r.max_params,
                    if r.passed { "PASS" } else { "FAIL" }
                );
            }
            if report.passed() {
                println!("all formulas within {TOLERANCE:e}");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("failed: {:?}", report.failed().iter().map(|f| f.name()).collect::<Vec<_>>());
                Ok(ExitCode::from(1))
            }
        }
        Command::WeightsExport { run, round, out } => {
            let export = weights_export(&run, round)?;
            match out {
                Some(path) => {
                    write_weights_csv(&path, &export.matrix)?;
                    println!("wrote {}", path.display());
                }
                None => {
                    for row in &export.matrix {
                        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                        println!("{}", cells.join(","));
                    }
                }
            }
            match export.score {
                Some(s) => println!("block_structure_score {s}"),
                None => println!("block_structure_score unavailable (no ground-truth clusters)"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::AblateFixed { common, fractions } => {
            let cfg = common.load()?;
            let table = ablate_fixed(&cfg, &fractions, common.threads)?;
            println!("{:<14} {:>10} {:>8} {:>12}", "variant", "test_acc", "std", "max_drift");
            for r in &table.rows {
                println!(
                    "{:<14} {:>10.4} {:>8.4} {:>12}",
                    r.variant, r.test_acc.mean, r.test_acc.std, r.max_weight_drift
                );
            }
            let path = write_json(&cfg.output_dir, "ablation.json", &table)?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Descent { common, d, eta_ratio } => {
            let cfg = common.load()?;
            let seed = cfg.seeds[0];
            let report = fedmerge_core::experiment::with_threads(common.threads, || {
                run_descent(&cfg, seed, d, eta_ratio)
            })??;
            println!("L_hat {:.6e}  eta {:.6e} ({} / L_hat)", report.l_hat, report.eta, report.eta_ratio);
            println!(
                "violating rounds: {:.1}% (smoothness bound), {:.1}% (relaxed bound) over {} rounds",
                100.0 * report.violation_fraction,
                100.0 * report.relaxed_violation_fraction,
                report.rounds.len()
            );
            if let Some(fit) = report.fit {
                println!("running-average fit: c = {:.6e}, plateau = {:.6e}", fit.c, fit.plateau);
            }
            let path = write_json(&cfg.output_dir, "descent.json", &report)?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::GenData(common) => {
            let cfg = common.load()?;
            for &seed in &cfg.seeds {
                let dir = cfg.output_dir.join(format!("data_seed_{seed}"));
                let files = generate_federation(&cfg, seed, &dir)?;
                println!("wrote {} client files to {}", files.len(), dir.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
