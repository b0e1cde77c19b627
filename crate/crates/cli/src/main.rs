use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use jif_core::data::SyntheticSpec;
use jif_core::experiment::{self, apply_override, ExperimentConfig};
use jif_core::stats::{CompareOptions, WilcoxonMode};
use jif_core::Error;

/// Joint-individual fusion experiments on images plus tabular metadata.
#[derive(Parser, Debug)]
#[command(name = "jif", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (meta.csv, schema.json, images/).
    Generate {
        /// JSON synthetic spec; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override a spec field, e.g. `--set mode=redundant`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train and evaluate every configured method on a seed × fold grid.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the configured seeds; may be repeated.
        #[arg(long)]
        seed: Vec<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Friedman and pairwise Wilcoxon tests over a results CSV.
    Compare {
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Column to compare.
        #[arg(long, default_value = "bac")]
        metric: String,
        /// Force the exact Wilcoxon distribution.
        #[arg(long, conflicts_with = "normal")]
        exact: bool,
        /// Force the normal approximation.
        #[arg(long)]
        normal: bool,
    },
    /// Finite-difference check of every differentiable block.
    Gradcheck {
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) | Error::Contract(_) => 1,
        _ => 2,
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn generate(config: Option<PathBuf>, out: &Path, seed: Option<u64>, overrides: &[String]) -> Result<u8, Error> {
    let mut value = match config {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)?
        }
        None => serde_json::to_value(SyntheticSpec::default())?,
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let mut spec: SyntheticSpec = serde_json::from_value(value)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = experiment::cmd_generate(&spec, out)?;
    println!("wrote {} samples of {} classes to {}", data.len(), data.classes(), out.display());
    Ok(0)
}

fn run(
    config: &Path,
    out: Option<PathBuf>,
    seeds: Vec<u64>,
    mut overrides: Vec<String>,
    jobs: usize,
) -> Result<u8, Error> {
    if let Some(o) = out {
        overrides.push(format!("out={}", serde_json::to_string(&o)?));
    }
    if !seeds.is_empty() {
        overrides.push(format!("seeds={}", serde_json::to_string(&seeds)?));
    }
    let cfg = ExperimentConfig::load(config, &overrides)?;
    let outcome = experiment::run_experiment(&cfg, jobs)?;
    println!("{:<16} {:>4} {:>15} {:>15} {:>15}", "method", "runs", "BAC", "ACC", "AUC");
    for s in &outcome.summary {
        println!(
            "{:<16} {:>4} {:>7.4} ± {:.4} {:>7.4} ± {:.4} {:>7.4} ± {:.4}",
            s.method, s.runs, s.bac_mean, s.bac_std, s.acc_mean, s.acc_std, s.auc_mean, s.auc_std
        );
    }
    println!("results in {}", outcome.out.display());
    for f in &outcome.failures {
        eprintln!("failed: {} {}: {}", f.method, f.run, f.error);
    }
    Ok(if outcome.succeeded() { 0 } else { 1 })
}

fn compare(results: &Path, out: &Path, alpha: f64, metric: &str, exact: bool, normal: bool) -> Result<u8, Error> {
    let mode = match (exact, normal) {
        (true, _) => WilcoxonMode::Exact,
        (_, true) => WilcoxonMode::Normal,
        _ => WilcoxonMode::Auto,
    };
    let report = experiment::cmd_compare(results, metric, &CompareOptions { alpha, mode }, out)?;
    print!("{}", report.to_markdown());
    Ok(0)
}

fn gradcheck(out: Option<PathBuf>, fault: bool) -> Result<u8, Error> {
    let reports = experiment::gradcheck_suite(fault)?;
    for r in &reports {
        println!(
            "{:<22} max rel err {:.3e} over {:>4} coords  {}",
            r.block,
            r.max_rel_error,
            r.coordinates,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    if let Some(path) = out {
        write_json(&path, &serde_json::to_value(&reports)?)?;
    }
    Ok(if reports.iter().all(|r| r.pass) { 0 } else { 1 })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate {
            config,
            out,
            seed,
            overrides,
        } => generate(config, &out, seed, &overrides),
        Command::Run {
            config,
            out,
            seed,
            overrides,
            jobs,
        } => run(&config, out, seed, overrides, jobs),
        Command::Compare {
            results,
            out,
            alpha,
            metric,
            exact,
            normal,
        } => compare(&results, &out, alpha, &metric, exact, normal),
        Command::Gradcheck { out, inject_fault } => gradcheck(out, inject_fault),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
