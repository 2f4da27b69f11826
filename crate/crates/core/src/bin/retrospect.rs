use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use retrospect::harness::{
    analyze, emit_paired, emit_run, emit_sweep, run_paired, sweep, train_one, RunConfig, SweepAxis,
};
use retrospect::retro::Norm;
use retrospect::tensor::composite_suite;

#[derive(Parser)]
#[command(name = "retrospect", version, about = "Train MLPs with and without the retrospective loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Single run.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        retro: Option<Toggle>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Baseline and retro arms for each seed.
    Pair {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired runs for each value of one hyperparameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// batch_size, optimizer, frequency, warmup, norm, kappa or momentum_param
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scalar gradient and consistency tables as CSV.
    Analyze {
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of randomized composite graphs.
    Gradcheck {
        #[arg(long, default_value_t = 24)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
}

fn load(path: &Path) -> Result<(RunConfig, PathBuf)> {
    let cfg = RunConfig::from_path(path).with_context(|| format!("loading {}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

/// `--out` as given, else the config's `out_dir` relative to the config file.
fn out_dir(out: Option<PathBuf>, cfg: &RunConfig, base: &Path) -> Result<PathBuf> {
    match out.or_else(|| cfg.out_dir.as_ref().map(|d| base.join(d))) {
        Some(d) => Ok(d),
        None => bail!("no output directory: pass --out or set out_dir in the config"),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, seed, retro, out } => {
            let (mut cfg, base) = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = retro {
                cfg.retro.enabled = matches!(t, Toggle::On);
            }
            let dir = out_dir(out, &cfg, &base)?;
            let rec = train_one(&cfg, &base)?;
            emit_run(&rec, &dir)?;
            match rec.final_test_error {
                Some(e) => println!("seed {} final test error {:.4} ({:.1}s)", rec.seed, e, rec.duration_secs),
                None => println!("seed {} status {:?}", rec.seed, rec.status),
            }
            Ok(rec.is_completed())
        }
        Command::Pair { config, seeds, out } => {
            let (cfg, base) = load(&config)?;
            let dir = out_dir(out, &cfg, &base)?;
            let res = run_paired(&cfg, &seeds, &base)?;
            emit_paired(&res, &dir)?;
            for p in &res.pairs {
                match (p.delta, &p.error) {
                    (Some(d), _) => println!("seed {}: delta {:+.4}", p.seed, d),
                    (None, Some(e)) => println!("seed {}: failed: {e}", p.seed),
                    (None, None) => println!("seed {}: no result", p.seed),
                }
            }
            let a = &res.aggregate;
            println!(
                "baseline {:.4} ± {:.4}, retro {:.4} ± {:.4}, retro better in {}/{}",
                a.baseline_mean, a.baseline_std, a.retro_mean, a.retro_std, a.retro_wins, a.completed
            );
            Ok(a.failed == 0)
        }
        Command::Sweep { config, axis, values, seeds, out } => {
            let (cfg, base) = load(&config)?;
            let dir = out_dir(out, &cfg, &base)?;
            let axis: SweepAxis = axis.parse()?;
            let table = sweep(&cfg, axis, &values, &seeds, &base)?;
            emit_sweep(&table, &dir)?;
            for c in &table.cells {
                match (&c.result, &c.error) {
                    (Some(r), _) => println!(
                        "{axis}={}: baseline {:.4}, retro {:.4}, delta {:+.4}",
                        c.value, r.aggregate.baseline_mean, r.aggregate.retro_mean, r.aggregate.delta_mean
                    ),
                    (None, e) => println!("{axis}={}: failed: {}", c.value, e.as_deref().unwrap_or("?")),
                }
            }
            Ok(table.cells.iter().all(|c| c.error.is_none()))
        }
        Command::Analyze { out } => {
            let rep = analyze(&out)?;
            println!(
                "gradient rows {} mismatches {}; probe failures l1 {} l2 {}",
                rep.gradient_rows.len(),
                rep.gradient_mismatches(),
                rep.probe_failures(Norm::L1),
                rep.probe_failures(Norm::L2)
            );
            Ok(rep.gradient_mismatches() == 0)
        }
        Command::Gradcheck { count, seed, tol } => {
            let mut ok = true;
            for c in composite_suite(count, seed)? {
                let pass = c.report.max_rel_error < tol;
                ok &= pass;
                println!(
                    "{} {:<28} seed {:<20} max rel {:.3e} margin {:.3}",
                    if pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.seed,
                    c.report.max_rel_error,
                    c.kink_margin
                );
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
