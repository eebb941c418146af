//! Batch entry point.
//!
//! Subcommands: `gen` writes synthetic datasets, `train` runs the
//! two-stage pipeline, `theory` runs the estimator rate sweep, and
//! `gradcheck` verifies every analytic gradient. Exit codes: 0 success,
//! 1 configuration error, 2 numerical failure, 3 I/O error.

mod spec;

use clap::{Args, Parser, Subcommand};
use sldg_core::dataset::{read_domain_csv, write_domain_csv};
use sldg_core::datagen::{gen_structural, gen_toy_domains, write_structural_csv};
use sldg_core::fmt::fmt_g6;
use sldg_core::gradcheck::{gradient_report, GRADCHECK_TOLERANCE};
use sldg_core::numerics::Rng;
use sldg_core::theory::{consistency_sweep, NAIVE_ERROR_FACTOR, SLOPE_BAND};
use sldg_core::trainer::run_experiment;
use sldg_core::{Error, Result};
use spec::load_spec;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Environment variable that overrides the default output root when
/// `--out` is not given.
const OUT_ROOT_ENV: &str = "SLDG_OUT_ROOT";
/// Test hook: corrupt one analytic gradient so the failure path of
/// `gradcheck` can be exercised end to end.
const CORRUPT_ENV: &str = "SLDG_GRADCHECK_CORRUPT";

#[derive(Parser)]
#[command(name = "sldg", about = "Single-labeled domain generalization lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run-spec file (flat TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory; falls back to $SLDG_OUT_ROOT, then the current
    /// directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the spec file's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress stdout reporting.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic datasets from a spec file.
    Gen(CommonArgs),
    /// Train per the spec file's mode and write metrics, summary, and a
    /// checkpoint.
    Train(CommonArgs),
    /// Run the estimator consistency sweep and rate report.
    Theory(CommonArgs),
    /// Check every loss gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        quiet: bool,
    },
}

fn out_dir(arg: &Option<PathBuf>) -> PathBuf {
    if let Some(dir) = arg {
        return dir.clone();
    }
    if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
        if !root.is_empty() {
            return PathBuf::from(root);
        }
    }
    PathBuf::from(".")
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parse { .. } => 1,
        Error::Dim { .. }
        | Error::NotSymmetric { .. }
        | Error::Singular { .. }
        | Error::NonFiniteGradient { .. }
        | Error::Numerical(_) => 2,
        Error::Io { .. } => 3,
    }
}

fn cmd_gen(args: &CommonArgs) -> Result<()> {
    let loaded = load_spec(&args.spec)?;
    let dir = out_dir(&args.out);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let seed = loaded.spec.seed(args.seed);
    let rng = Rng::from_seed(seed);
    let kind = loaded.spec.kind.as_deref().unwrap_or("toy");
    let mut written: Vec<PathBuf> = Vec::new();
    match kind {
        "toy" => {
            let toy = loaded.spec.toy_spec()?;
            for ds in gen_toy_domains(&toy, &rng)? {
                let path = dir.join(format!("domain_{}.csv", ds.domain_id));
                write_domain_csv(&ds, &path)?;
                written.push(path);
            }
            write_spec_echo(&dir, &loaded.raw, seed, &toy)?;
        }
        "structural" => {
            let spec = loaded.spec.structural_spec()?;
            for (j, dom) in gen_structural(&spec, &rng)?.iter().enumerate() {
                let path = dir.join(format!("structural_{j}.csv"));
                write_structural_csv(j, dom, &path)?;
                written.push(path);
            }
            write_spec_echo(&dir, &loaded.raw, seed, &spec)?;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown kind `{other}` (expected toy or structural)"
            )))
        }
    }
    if !args.quiet {
        for path in &written {
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn write_spec_echo<T: serde::Serialize>(
    dir: &Path,
    raw: &str,
    seed: u64,
    resolved: &T,
) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Echo<'a, T> {
        spec_file: &'a str,
        seed: u64,
        resolved: &'a T,
    }
    let path = dir.join("spec_echo.json");
    let json = serde_json::to_string_pretty(&Echo {
        spec_file: raw,
        seed,
        resolved,
    })
    .map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

fn cmd_train(args: &CommonArgs) -> Result<()> {
    let loaded = load_spec(&args.spec)?;
    let dir = out_dir(&args.out);
    let cfg = loaded.spec.train_config(args.seed)?;
    let paths = loaded.spec.data_paths(&loaded.base_dir)?;
    let mut domains = Vec::new();
    for path in &paths {
        domains.push(read_domain_csv(path)?);
    }
    domains.sort_by_key(|d| d.domain_id);

    let labeled_id = loaded.spec.labeled_domain.unwrap_or(0);
    let target_id = loaded.spec.target_domain;
    let labeled_pos = domains
        .iter()
        .position(|d| d.domain_id == labeled_id)
        .ok_or_else(|| Error::Config(format!("labeled_domain {labeled_id} not among data files")))?;
    let labeled = domains.remove(labeled_pos);
    let target = match target_id {
        Some(id) => {
            let pos = domains
                .iter()
                .position(|d| d.domain_id == id)
                .ok_or_else(|| Error::Config(format!("target_domain {id} not among data files")))?;
            Some(domains.remove(pos))
        }
        None => None,
    };

    let output = run_experiment(
        &labeled,
        &domains,
        target.as_ref(),
        &cfg,
        &loaded.raw,
        Some(&dir),
    )?;
    if !args.quiet {
        println!("{:<20} {:<10} accuracy", "domain", "role");
        for d in &output.per_domain {
            println!("{:<20} {:<10} {}", d.name, d.role, fmt_g6(d.accuracy));
        }
    }
    Ok(())
}

fn cmd_theory(args: &CommonArgs) -> Result<()> {
    let loaded = load_spec(&args.spec)?;
    let dir = out_dir(&args.out);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let spec = loaded.spec.structural_spec()?;
    let sweep = loaded.spec.sweep_config()?;
    let seed = loaded.spec.seed(args.seed);
    let report = consistency_sweep(&spec, &sweep, &Rng::from_seed(seed))?;

    let csv_path = dir.join("rate_report.csv");
    std::fs::write(&csv_path, report.to_csv_string())
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;

    #[derive(serde::Serialize)]
    struct TheorySummary<'a> {
        config_echo: &'a str,
        seed: u64,
        slope: f64,
        slope_band: (f64, f64),
        slope_in_band: bool,
        unbiased_within_4_se: bool,
        naive_error_ratio: f64,
        naive_ratio_pass: bool,
    }
    let summary = TheorySummary {
        config_echo: &loaded.raw,
        seed,
        slope: report.slope,
        slope_band: SLOPE_BAND,
        slope_in_band: report.slope_in_band(),
        unbiased_within_4_se: report.unbiased_within(4.0),
        naive_error_ratio: report.naive_error_ratio,
        naive_ratio_pass: report.naive_error_ratio >= NAIVE_ERROR_FACTOR,
    };
    let json_path = dir.join("theory_summary.json");
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse {
        path: json_path.display().to_string(),
        detail: e.to_string(),
    })?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(json_path.display().to_string(), e))?;

    if !args.quiet {
        println!(
            "slope {}  band [{}, {}]  {}",
            fmt_g6(report.slope),
            SLOPE_BAND.0,
            SLOPE_BAND.1,
            if summary.slope_in_band { "PASS" } else { "FAIL" }
        );
        println!(
            "mean estimate within 4 SE of truth: {}",
            if summary.unbiased_within_4_se { "PASS" } else { "FAIL" }
        );
        println!(
            "naive/two-stage error ratio at n={}: {} (>= {}) {}",
            report.points.last().map(|p| p.n).unwrap_or(0),
            fmt_g6(report.naive_error_ratio),
            NAIVE_ERROR_FACTOR,
            if summary.naive_ratio_pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, quiet: bool) -> Result<()> {
    let corrupt = std::env::var(CORRUPT_ENV).map(|v| v == "1").unwrap_or(false);
    let checks = gradient_report(seed, corrupt);
    let mut all_pass = true;
    for check in &checks {
        all_pass &= check.pass();
        if !quiet {
            println!(
                "{:<6} max_rel_err {}  {}",
                check.name,
                fmt_g6(check.max_rel_err),
                if check.pass() { "PASS" } else { "FAIL" }
            );
        }
    }
    if !quiet {
        println!(
            "gradcheck: {} ({}/{} within {GRADCHECK_TOLERANCE:.0e})",
            if all_pass { "PASS" } else { "FAIL" },
            checks.iter().filter(|c| c.pass()).count(),
            checks.len()
        );
    }
    if all_pass {
        Ok(())
    } else {
        Err(Error::Numerical(
            "at least one analytic gradient disagrees with finite differences".into(),
        ))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = match &cli.command {
        Command::Gen(a) | Command::Train(a) | Command::Theory(a) => a.quiet,
        Command::Gradcheck { quiet, .. } => *quiet,
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if quiet {
        "error"
    } else {
        "warn"
    }))
    .init();

    let result = match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Theory(args) => cmd_theory(args),
        Command::Gradcheck { seed, quiet } => cmd_gradcheck(*seed, *quiet),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
