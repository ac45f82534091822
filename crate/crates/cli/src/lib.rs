//! The `bidrn` command line: argument parsing and the command
//! implementations, kept in a library so tests can drive them in-process.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bidrn_core::autograd::gradcheck::{
    rule_reports, ste_saturation_probe, GradCheckReport, REL_TOL,
};
use bidrn_core::boxnet::box_gradcheck;
use bidrn_core::layers::{gradcheck::layer_reports, NetworkConfig, Preset};
use bidrn_core::stats::{bench_conv, model_stats, BenchSizes};
use bidrn_core::train::{smoothed_endpoints, trace_csv, train_toy, TrainOptions};
use bidrn_core::verify::{run_verify, Fault, VerifyOptions};
use bidrn_core::Error;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Outcome of one command: exit code, text for humans and an optional
/// machine-readable payload.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandResult {
    pub code: i32,
    pub summary: String,
    pub json: Option<Value>,
}

impl CommandResult {
    fn ok(summary: String, json: Option<Value>) -> Self {
        CommandResult {
            code: EXIT_OK,
            summary,
            json,
        }
    }

    fn usage(summary: impl Into<String>) -> Self {
        CommandResult {
            code: EXIT_USAGE,
            summary: summary.into(),
            json: None,
        }
    }
}

/// Maps a library error onto the exit-code contract.
pub fn from_error(e: &Error) -> CommandResult {
    let code = match e {
        Error::Diverged { .. } | Error::Contract(_) => EXIT_FAILED,
        _ => EXIT_USAGE,
    };
    CommandResult {
        code,
        summary: format!("error: {e}"),
        json: None,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "bidrn",
    version,
    about = "1-bit BiDRN kernels: verification, gradient checks, stats, benchmarks and toy training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    /// Drop the tail mask of the packed dot product.
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SizesArg {
    Small,
    Medium,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Randomized kernel, packing, scaling and shape-law suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Cases per suite.
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Finite-difference check of every backward rule and composed layer.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative tolerance override.
        #[arg(long, hide = true)]
        rel_tol: Option<f64>,
    },
    /// Params/OPs accounting of a network config, as JSON.
    Stats {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Packed vs float convolution timings, as CSV.
    Bench {
        #[arg(long, value_enum, default_value_t = SizesArg::Small)]
        sizes: SizesArg,
        /// Repetitions per shape (default depends on the size set).
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a config on the synthetic teacher task.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        /// Task seed (defaults to the config's seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Directory receiving `trace.csv` and `final.ckpt`.
        #[arg(long, default_value = "bidrn-train")]
        out: PathBuf,
    },
    /// Write a template config for a named preset.
    InitConfig {
        /// base-lcr, full-bidrb or table4a-step-N (N in 0..=4).
        preset: String,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> CommandResult
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli.command),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            CommandResult {
                code,
                summary: e.render().to_string(),
                json: None,
            }
        }
    }
}

pub fn execute(cmd: Command) -> CommandResult {
    match cmd {
        Command::Verify {
            seed,
            cases,
            inject_fault,
        } => cmd_verify(
            seed,
            cases,
            inject_fault.map(|f| match f {
                FaultArg::Mask => Fault::UnmaskedTail,
            }),
        ),
        Command::Gradcheck { seed, rel_tol } => cmd_gradcheck(seed, rel_tol.unwrap_or(REL_TOL)),
        Command::Stats { config, out } => cmd_stats(&config, out.as_deref()),
        Command::Bench { sizes, reps, out } => {
            let sizes = match sizes {
                SizesArg::Small => BenchSizes::Small,
                SizesArg::Medium => BenchSizes::Medium,
            };
            cmd_bench(sizes, reps, out.as_deref())
        }
        Command::TrainToy {
            config,
            steps,
            seed,
            out,
        } => cmd_train_toy(&config, steps, seed, &out),
        Command::InitConfig { preset, out } => cmd_init_config(&preset, out.as_deref()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CommandResult> {
    std::fs::write(path, text)
        .map_err(|e| CommandResult::usage(format!("error: cannot write {}: {e}", path.display())))
}

pub fn cmd_verify(seed: u64, cases: usize, fault: Option<Fault>) -> CommandResult {
    let results = run_verify(&VerifyOptions { seed, cases, fault });
    let mut summary = String::new();
    let (mut passed, mut total) = (0, 0);
    for r in &results {
        writeln!(
            summary,
            "{:<16} {:>5}/{:<5} {}",
            r.suite,
            r.passed,
            r.cases,
            if r.ok() { "ok" } else { "FAILED" }
        )
        .expect("string write");
        passed += r.passed;
        total += r.cases;
    }
    write!(summary, "total {passed}/{total} cases passed").expect("string write");
    let failure = results.iter().find(|r| !r.ok());
    if let Some(f) = failure {
        let example = serde_json::to_string(&f.first_failure).expect("json");
        write!(summary, "\nfirst counterexample ({}): {example}", f.suite).expect("string write");
    }
    CommandResult {
        code: if failure.is_some() {
            EXIT_FAILED
        } else {
            EXIT_OK
        },
        summary,
        json: Some(json!({ "seed": seed, "suites": results })),
    }
}

fn report_json(r: &GradCheckReport, tol: f64) -> Value {
    json!({
        "rule": r.rule,
        "checked": r.checked,
        "worst_relative": r.worst_relative,
        "worst_param": r.worst_param,
        "worst_index": r.worst_index,
        "passed": r.worst_relative <= tol,
    })
}

pub fn cmd_gradcheck(seed: u64, tol: f64) -> CommandResult {
    let collected = (|| -> bidrn_core::Result<(Vec<GradCheckReport>, f64)> {
        let mut reports = rule_reports(seed)?;
        reports.extend(layer_reports(seed)?);
        reports.push(box_gradcheck(seed)?);
        Ok((reports, ste_saturation_probe(seed)?))
    })();
    let (reports, saturated) = match collected {
        Ok(v) => v,
        Err(e) => return from_error(&e),
    };
    let mut summary = String::new();
    for r in &reports {
        let status = if r.worst_relative <= tol {
            "ok"
        } else {
            "FAILED"
        };
        writeln!(
            summary,
            "{:<28} checked {:>4}  worst relative error {:.3e}  {status}",
            r.rule, r.checked, r.worst_relative
        )
        .expect("string write");
    }
    write!(
        summary,
        "ste saturated-input gradient max |g| = {saturated}"
    )
    .expect("string write");
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| r.worst_relative > tol)
        .map(|r| r.rule.as_str())
        .collect();
    let saturated_ok = saturated == 0.0;
    if !failed.is_empty() {
        write!(
            summary,
            "\ntolerance {tol:e} exceeded by: {}",
            failed.join(", ")
        )
        .expect("string write");
    }
    if !saturated_ok {
        write!(summary, "\nste_saturation: gradient is not exactly zero").expect("string write");
    }
    CommandResult {
        code: if failed.is_empty() && saturated_ok {
            EXIT_OK
        } else {
            EXIT_FAILED
        },
        summary,
        json: Some(json!({
            "seed": seed,
            "tolerance": tol,
            "reports": reports.iter().map(|r| report_json(r, tol)).collect::<Vec<_>>(),
            "ste_saturated_max_grad": saturated,
        })),
    }
}

pub fn cmd_stats(config: &Path, out: Option<&Path>) -> CommandResult {
    let stats = match NetworkConfig::from_path(config).and_then(|cfg| model_stats(&cfg)) {
        Ok(s) => s,
        Err(e) => return from_error(&e),
    };
    let text = stats.to_json();
    if let Some(path) = out {
        if let Err(r) = write_file(path, &text) {
            return r;
        }
    }
    let value = serde_json::to_value(stats).expect("stats serialize");
    CommandResult::ok(text.trim_end().to_string(), Some(value))
}

pub fn cmd_bench(sizes: BenchSizes, reps: Option<usize>, out: Option<&Path>) -> CommandResult {
    let reps = reps.unwrap_or_else(|| sizes.default_reps());
    if reps == 0 {
        return CommandResult::usage("error: --reps must be >= 1");
    }
    let report = match bench_conv(&sizes.shapes(), reps) {
        Ok(r) => r,
        Err(e) => return from_error(&e),
    };
    let csv = report.to_csv();
    if let Some(path) = out {
        if let Err(r) = write_file(path, &csv) {
            return r;
        }
    }
    let identical = report.rows.iter().all(|r| r.checksums_identical);
    CommandResult {
        code: if identical { EXIT_OK } else { EXIT_FAILED },
        summary: csv.trim_end().to_string(),
        json: None,
    }
}

pub const TRACE_FILE: &str = "trace.csv";
pub const CHECKPOINT_FILE: &str = "final.ckpt";

pub fn cmd_train_toy(config: &Path, steps: usize, seed: Option<u64>, out: &Path) -> CommandResult {
    let cfg = match NetworkConfig::from_path(config) {
        Ok(c) => c,
        Err(e) => return from_error(&e),
    };
    let opts = TrainOptions {
        steps,
        seed: seed.unwrap_or(cfg.seed),
        ..TrainOptions::default()
    };
    let report = match train_toy(&cfg, &opts) {
        Ok(r) => r,
        Err(e) => return from_error(&e),
    };
    if let Err(e) = std::fs::create_dir_all(out) {
        return CommandResult::usage(format!("error: cannot create {}: {e}", out.display()));
    }
    let trace_path = out.join(TRACE_FILE);
    if let Err(r) = write_file(&trace_path, &trace_csv(&report.trace)) {
        return r;
    }
    let ckpt = out.join(CHECKPOINT_FILE);
    if let Err(e) = report.network.save(&ckpt) {
        return from_error(&e);
    }
    let mut summary = format!("trained {steps} steps (seed {})", opts.seed);
    let mut payload = json!({
        "steps": steps,
        "seed": opts.seed,
        "trace": trace_path.display().to_string(),
        "checkpoint": ckpt.display().to_string(),
    });
    if let Some((first, last)) = smoothed_endpoints(&report.trace, 20) {
        write!(
            summary,
            "; smoothed loss {first:.5} -> {last:.5} (ratio {:.3})",
            last / first
        )
        .expect("string write");
        payload["initial_loss"] = json!(first);
        payload["final_loss"] = json!(last);
    }
    write!(
        summary,
        "\nwrote {} and {}",
        trace_path.display(),
        ckpt.display()
    )
    .expect("string write");
    CommandResult::ok(summary, Some(payload))
}

pub fn cmd_init_config(preset: &str, out: Option<&Path>) -> CommandResult {
    let preset: Preset = match preset.parse() {
        Ok(p) => p,
        Err(e) => return from_error(&e),
    };
    let mut text = preset.config().to_json_pretty();
    text.push('\n');
    match out {
        Some(path) => match write_file(path, &text) {
            Ok(()) => {
                CommandResult::ok(format!("wrote {preset} config to {}", path.display()), None)
            }
            Err(r) => r,
        },
        None => CommandResult::ok(text.trim_end().to_string(), None),
    }
}

/// Reads `BIDRN_THREADS` and sizes the global rayon pool. Unset or empty
/// leaves the default.
pub fn configure_threads(value: Option<&str>) -> Result<(), CommandResult> {
    let Some(v) = value.map(str::trim).filter(|v| !v.is_empty()) else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
        CommandResult::usage(format!(
            "error: BIDRN_THREADS must be a positive integer, got `{v}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CommandResult::usage(format!("error: cannot size thread pool: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(from_error(&Error::Contract("x".into())).code, EXIT_FAILED);
        assert_eq!(
            from_error(&Error::Diverged {
                step: 3,
                loss: f64::NAN
            })
            .code,
            EXIT_FAILED
        );
        assert_eq!(from_error(&Error::Io("x".into())).code, EXIT_USAGE);
    }

    #[test]
    fn thread_setting_rejects_non_positive_values() {
        assert!(configure_threads(None).is_ok());
        assert!(configure_threads(Some("  ")).is_ok());
        for bad in ["0", "-3", "many"] {
            assert_eq!(configure_threads(Some(bad)).unwrap_err().code, EXIT_USAGE);
        }
    }
}
