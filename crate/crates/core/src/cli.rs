//! Command-line dispatch: one mode per invocation, reports on disk, exit
//! code 0 only when every postcondition held.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;

use crate::config::{parse_config, Mode, RawConfig, RunConfig};
use crate::cost::{bench, estimate_flops, sweep, BenchOptions, SweepOptions};
use crate::encoder::{shape_trace, EncoderParams, InsertionPoint};
use crate::error::{Error, Result};
use crate::gradcheck::{check_encode, check_merger};
use crate::pml::MergerVariant;
use crate::report::{
    emit_plot, emit_report, sibling, GradCheckEntry, GradCheckSummary, LayerTokens, Report,
    ShapeReport, SweepReport,
};
use crate::train::{train_stage1, Projector};

/// Caps sweep parallelism; bench runs stay sequential regardless.
pub const THREADS_ENV: &str = "LACO_KIT_THREADS";

/// Finite-difference step for both gradient checks.
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const MERGER_TOLERANCE: f64 = 1e-5;
pub const ENCODE_TOLERANCE: f64 = 1e-4;

/// Layer-wise visual token compression toolkit.
///
/// Settings come from an optional flat JSON file (--config) and flags with
/// the same names; flags win. Exit codes: 0 success, 1 invalid
/// configuration, 2 failed runtime assertion, 3 I/O error. Set
/// LACO_KIT_THREADS to cap sweep worker threads.
#[derive(Debug, Parser)]
#[command(name = "laco-kit", version)]
pub struct Cli {
    /// What to run [default: the config file's "mode"]
    #[arg(value_enum)]
    pub mode: Option<Mode>,
    /// Flat JSON config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: RawConfig,
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(None),
    }
}

impl Cli {
    pub fn into_config(self) -> Result<RunConfig> {
        let mut flags = self.settings;
        flags.mode = self.mode;
        let mut cfg = parse_config(self.config.as_deref(), flags)?;
        cfg.threads = threads_from_env()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: Report,
    pub files: Vec<PathBuf>,
}

fn shapes(cfg: &RunConfig) -> Report {
    let e = &cfg.encoder;
    let k = cfg.insertion.effective(cfg.variant, e.layers);
    let trace = shape_trace(e, InsertionPoint::after_stack(k), cfg.r);
    let tokens_out = if cfg.r.is_identity() {
        e.tokens()
    } else {
        e.tokens() / cfg.r.area()
    };
    Report::Shapes(ShapeReport {
        tokens_in: e.tokens(),
        k,
        r: cfg.r.get(),
        layers: trace
            .into_iter()
            .enumerate()
            .map(|(i, tokens)| LayerTokens {
                layer: i + 1,
                tokens,
            })
            .collect(),
        tokens_out,
    })
}

fn gradcheck(cfg: &RunConfig) -> Result<Report> {
    let pml = check_merger(
        &cfg.encoder,
        cfg.r,
        MergerVariant::PmlOnly,
        cfg.seed,
        cfg.coords,
        GRADCHECK_STEP,
    )?;
    let merger = check_merger(
        &cfg.encoder,
        cfg.r,
        MergerVariant::PmlWithResidual,
        cfg.seed,
        cfg.coords,
        GRADCHECK_STEP,
    )?;
    let encode = check_encode(
        &cfg.encoder,
        cfg.insertion,
        cfg.r,
        cfg.variant,
        cfg.seed,
        cfg.coords,
        GRADCHECK_STEP,
    )?;
    let entry =
        |check: &str, r: crate::gradcheck::GradCheckReport, tolerance: f64| GradCheckEntry {
            check: check.to_string(),
            coordinates: r.checked,
            max_rel_error: r.max_rel_error,
            tolerance,
            passed: r.max_rel_error <= tolerance,
        };
    Ok(Report::Gradcheck(GradCheckSummary {
        step: GRADCHECK_STEP,
        seed: cfg.seed,
        checks: vec![
            entry("pml", pml, MERGER_TOLERANCE),
            entry("merger", merger, MERGER_TOLERANCE),
            entry("encode", encode, ENCODE_TOLERANCE),
        ],
    }))
}

fn train(cfg: &RunConfig) -> Result<(Report, PathBuf)> {
    let e = &cfg.encoder;
    let mut params = EncoderParams::init(e, cfg.r, cfg.train.seed)?;
    let mut projector = Projector::identity(e.width);
    let mut log = train_stage1(
        &mut params,
        &mut projector,
        &cfg.train,
        e,
        cfg.insertion,
        cfg.r,
        cfg.variant,
    )?;
    let snapshot = sibling(&cfg.out, "params.json");
    params.merger.save(&snapshot)?;
    log.params_snapshot = Some(snapshot.display().to_string());
    Ok((Report::Train(log), snapshot))
}

/// Runs one mode and writes its artifacts. When a postcondition fails the
/// report is still written before the error is returned.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    let mut extra = Vec::new();
    let report = match cfg.mode {
        Mode::Shapes => shapes(cfg),
        Mode::Flops => {
            let mut r = estimate_flops(&cfg.encoder, cfg.insertion, cfg.r, cfg.variant)?;
            r.metadata.seed = cfg.seed;
            r.metadata.fraction = cfg.fraction();
            Report::Flops(r)
        }
        Mode::Bench => {
            let opts = BenchOptions {
                trials: cfg.trials,
                warmup: cfg.warmup,
                seed: cfg.seed,
            };
            let mut r = bench(&cfg.encoder, cfg.insertion, cfg.r, cfg.variant, opts)?;
            r.metadata.fraction = cfg.fraction();
            Report::Bench(r)
        }
        Mode::Gradcheck => gradcheck(cfg)?,
        Mode::Train => {
            let (report, snapshot) = train(cfg)?;
            extra.push(snapshot);
            report
        }
        Mode::Sweep => {
            let opts = SweepOptions {
                bench: cfg.measure_latency.then_some(BenchOptions {
                    trials: cfg.trials,
                    warmup: cfg.warmup,
                    seed: cfg.seed,
                }),
                threads: cfg.threads,
            };
            let mut points = sweep(&cfg.encoder, &cfg.fractions, cfg.r, &cfg.variants, opts);
            for p in &mut points {
                if let Some(r) = p.report.as_mut() {
                    r.metadata.seed = cfg.seed;
                }
            }
            if cfg.plot {
                let (dat, gp) = emit_plot(&points, &cfg.out)?;
                extra.extend([dat, gp]);
            }
            Report::Sweep(SweepReport { points })
        }
    };
    let mut files = emit_report(&report, cfg.format, &cfg.out)?;
    files.extend(extra);
    check_postconditions(&report)?;
    Ok(RunOutcome { report, files })
}

fn check_postconditions(report: &Report) -> Result<()> {
    match report {
        Report::Flops(r) | Report::Bench(r) => r.check_invariants(),
        Report::Gradcheck(g) if !g.passed() => {
            let failed: Vec<String> = g
                .checks
                .iter()
                .filter(|c| !c.passed)
                .map(|c| {
                    format!(
                        "{} max relative error {:e} > {:e}",
                        c.check, c.max_rel_error, c.tolerance
                    )
                })
                .collect();
            Err(Error::Assertion(format!(
                "gradient check failed: {}",
                failed.join("; ")
            )))
        }
        Report::Train(t) if !t.frozen_unchanged => Err(Error::Assertion(
            "frozen encoder weights changed during training".into(),
        )),
        Report::Sweep(s) => match s.points.iter().find(|p| p.error.is_some()) {
            Some(p) => Err(Error::Evaluation(format!(
                "sweep point fraction {} ({}) failed: {}",
                p.fraction,
                p.variant,
                p.error.as_deref().unwrap_or_default()
            ))),
            None => Ok(()),
        },
        _ => Ok(()),
    }
}

/// Parses `args`, runs, reports on stdout/stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = cli.into_config().and_then(|cfg| run(&cfg));
    match result {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("laco-kit: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses_flags() {
        let cli = Cli::try_parse_from([
            "laco-kit",
            "sweep",
            "--L",
            "24",
            "--fractions",
            "1/12,1/6,1/4,1/2,1",
            "--seed",
            "3",
            "--plot",
        ])
        .unwrap();
        assert_eq!(cli.mode, Some(Mode::Sweep));
        assert_eq!(cli.settings.layers, Some(24));
        assert_eq!(cli.settings.fractions.as_ref().unwrap().len(), 5);
        assert_eq!(cli.settings.plot, Some(true));
    }

    #[test]
    fn shapes_rows_follow_insertion_point() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("shapes.csv");
        let code = main_with_args([
            "laco-kit",
            "shapes",
            "--L",
            "24",
            "--N",
            "576",
            "--patch",
            "14",
            "--k",
            "6",
            "--r",
            "2",
            "--format",
            "csv",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let csv = std::fs::read_to_string(&out).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows[0], "layer,tokens");
        assert_eq!(rows.len(), 25);
        for (i, row) in rows[1..].iter().enumerate() {
            let expected = if i < 6 { 576 } else { 144 };
            assert_eq!(*row, format!("{},{expected}", i + 1));
        }
    }

    #[test]
    fn exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x.json");
        let out = out.to_str().unwrap();
        assert_eq!(
            main_with_args(["laco-kit", "shapes", "--r", "3", "--out", out]),
            1
        );
        assert_eq!(main_with_args(["laco-kit", "shapes", "--bogus"]), 1);
        assert_eq!(
            main_with_args(["laco-kit", "shapes", "--out", "/nonexistent/dir/x.json"]),
            3
        );
        assert_eq!(main_with_args(["laco-kit", "shapes", "--out", out]), 0);
    }
}
