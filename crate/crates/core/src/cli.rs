//! Command-line front end: FD verification, bound reports and convergence
//! traces, written as JSON (`"schema": 1`) or CSV.
//!
//! Exit codes: 0 pass, 1 property failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::block::Model;
use crate::bounds::{all_bounds, BoundReport, Variant};
use crate::convergence::{run_experiment, DatasetSource, Experiment, ExperimentResult, Minimum, TraceRecord};
use crate::error::{Error, Result};
use crate::sampling::{instance, Instance};
use crate::suite::{all_checks, CheckRecord};
use crate::Dims;

pub const SCHEMA: u32 = 1;
pub const SEED_ENV: &str = "CURVFORGE_SEED";

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// FD agreement of every analytic derivative.
    Verify,
    /// Measured norms against analytic bounds.
    Bounds,
    /// Loss-difference trace against its envelope.
    Converge,
    /// Short verify, bounds and converge runs.
    Selftest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "curvforge", version, about = "Transformer-block Hessians, bounds and FD checks")]
pub struct Args {
    #[arg(long, value_enum)]
    pub cmd: Command,
    /// Sequence length.
    #[arg(long = "L", default_value_t = 3)]
    pub l: usize,
    #[arg(long, default_value_t = 4)]
    pub dv: usize,
    #[arg(long, default_value_t = 2)]
    pub dk: usize,
    #[arg(long, default_value_t = 4)]
    pub dff: usize,
    /// Base seed; overridden by CURVFORGE_SEED.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, value_enum, default_value_t = Model::Block)]
    pub model: Model,
    #[arg(long, value_enum, default_value_t = Variant::Appendix)]
    pub bound_variant: Variant,
    /// CSV sample file or `synthetic:<count>`.
    #[arg(long, default_value = "synthetic:512")]
    pub data: String,
    /// Probe offset `‖w − w*‖` for `converge`.
    #[arg(long, default_value_t = 0.1)]
    pub radius: f64,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Defaults to csv for `converge`, json otherwise.
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub dims: Dims,
    pub seed: u64,
    pub instances: usize,
    pub model: Model,
    pub bound_variant: Variant,
    #[serde(skip)]
    pub data: String,
    pub radius: f64,
    #[serde(skip)]
    pub output: Option<PathBuf>,
    pub format: Format,
}

impl RunConfig {
    /// Validates `args`; `env_seed` is the raw value of `CURVFORGE_SEED`.
    pub fn from_args(args: Args, env_seed: Option<&str>) -> Result<RunConfig> {
        let dims = Dims::new(args.l, args.dv, args.dk, args.dff)?;
        let seed = match env_seed {
            Some(s) => s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?,
            None => args.seed,
        };
        if args.instances == 0 {
            return Err(Error::Config("--instances must be at least 1".into()));
        }
        if !(args.radius.is_finite() && args.radius >= 0.0) {
            return Err(Error::Config(format!("--radius must be finite and non-negative, got {}", args.radius)));
        }
        let format = args.format.unwrap_or(match args.cmd {
            Command::Converge => Format::Csv,
            _ => Format::Json,
        });
        Ok(RunConfig {
            command: args.cmd,
            dims,
            seed,
            instances: args.instances,
            model: args.model,
            bound_variant: args.bound_variant,
            data: args.data,
            radius: args.radius,
            output: args.out,
            format,
        })
    }

    fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.instances as u64).map(move |i| self.seed.wrapping_add(i))
    }
}

/// What a command produced: the report text and whether every property held.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: String,
    pub pass: bool,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema: u32,
    #[serde(flatten)]
    config: &'a RunConfig,
    pass: bool,
    records: &'a [T],
}

fn json<T: Serialize>(cfg: &RunConfig, pass: bool, records: &[T]) -> String {
    let env = Envelope {
        schema: SCHEMA,
        config: cfg,
        pass,
        records,
    };
    serde_json::to_string_pretty(&env).expect("report serializes") + "\n"
}

fn csv_text<T: Serialize>(records: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn instances(cfg: &RunConfig) -> Result<Vec<Instance>> {
    cfg.seeds()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|s| instance(cfg.dims, s))
        .collect()
}

/// Records sorted by `(name, seed)`.
pub fn verify_records(cfg: &RunConfig) -> Result<Vec<CheckRecord>> {
    let per: Vec<Vec<CheckRecord>> = instances(cfg)?.par_iter().map(all_checks).collect::<Result<_>>()?;
    let mut all: Vec<CheckRecord> = per.into_iter().flatten().collect();
    all.sort_by(|a, b| a.name.cmp(&b.name).then(a.seed.cmp(&b.seed)));
    Ok(all)
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<Outcome> {
    let recs = verify_records(cfg)?;
    let pass = recs.iter().all(|r| r.pass);
    let report = match cfg.format {
        Format::Json => json(cfg, pass, &recs),
        Format::Csv => csv_text(&recs)?,
    };
    Ok(Outcome { report, pass })
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundRecord {
    pub name: String,
    pub seed: u64,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
    pub inputs_digest: String,
}

impl BoundRecord {
    fn new(seed: u64, r: BoundReport) -> BoundRecord {
        BoundRecord {
            holds: r.holds(),
            name: r.name,
            seed,
            lhs: r.lhs,
            rhs: r.rhs,
            slack: r.slack,
            inputs_digest: r.inputs_digest,
        }
    }
}

/// Records sorted by `(name, seed)`.
pub fn bound_records(cfg: &RunConfig) -> Result<Vec<BoundRecord>> {
    let per: Vec<Vec<BoundRecord>> = instances(cfg)?
        .par_iter()
        .map(|inst| {
            let reps = all_bounds(&inst.x, &inst.target, &inst.params, cfg.model, cfg.bound_variant)?;
            Ok(reps.into_iter().map(|r| BoundRecord::new(inst.seed, r)).collect())
        })
        .collect::<Result<_>>()?;
    let mut all: Vec<BoundRecord> = per.into_iter().flatten().collect();
    all.sort_by(|a, b| a.name.cmp(&b.name).then(a.seed.cmp(&b.seed)));
    Ok(all)
}

pub fn cmd_bounds(cfg: &RunConfig) -> Result<Outcome> {
    let recs = bound_records(cfg)?;
    let pass = recs.iter().all(|r| r.holds);
    let report = match cfg.format {
        Format::Json => json(cfg, pass, &recs),
        Format::Csv => csv_text(&recs)?,
    };
    Ok(Outcome { report, pass })
}

pub fn converge_result(cfg: &RunConfig) -> Result<ExperimentResult> {
    let src = DatasetSource::parse(&cfg.data, cfg.dims, cfg.seed)?;
    let samples = src.load()?;
    let exp = Experiment {
        model: cfg.model,
        variant: cfg.bound_variant,
        seed: cfg.seed,
        radius: cfg.radius,
        k0: None,
    };
    run_experiment(&samples, cfg.dims, &exp)
}

pub fn cmd_converge(cfg: &RunConfig) -> Result<Outcome> {
    let res = converge_result(cfg)?;
    let tr = &res.trace;
    let pass = tr.violations().is_empty() && tr.slope_ok();
    let slope = tr.default_slope().map_or("nan".to_string(), |s| format!("{s:.6}"));
    let report = match cfg.format {
        Format::Csv => {
            let meta = [
                ("seed", cfg.seed.to_string()),
                ("k0", res.k0.to_string()),
                ("wstar_grad_norm", format!("{:e}", res.minimum.grad_norm)),
                ("wstar_converged", res.minimum.converged.to_string()),
                ("slope", slope),
                ("pass", pass.to_string()),
            ];
            let mut buf = Vec::new();
            tr.write_csv(&mut buf, &meta)
                .map_err(|e| Error::Config(format!("trace: {e}")))?;
            String::from_utf8(buf).expect("trace is utf-8")
        }
        Format::Json => {
            #[derive(Serialize)]
            struct Trace<'a> {
                schema: u32,
                #[serde(flatten)]
                config: &'a RunConfig,
                k0: usize,
                wstar: &'a Minimum,
                slope: Option<f64>,
                pass: bool,
                records: &'a [TraceRecord],
            }
            let t = Trace {
                schema: SCHEMA,
                config: cfg,
                k0: res.k0,
                wstar: &res.minimum,
                slope: tr.default_slope(),
                pass,
                records: &tr.records,
            };
            serde_json::to_string_pretty(&t).expect("trace serializes") + "\n"
        }
    };
    Ok(Outcome { report, pass })
}

/// A few instances of `verify` and `bounds` plus a short attention-model
/// convergence run, summarized as JSON.
pub fn cmd_selftest(cfg: &RunConfig) -> Result<Outcome> {
    let small = RunConfig {
        instances: cfg.instances.min(3),
        ..cfg.clone()
    };
    let checks = verify_records(&small)?;
    let bounds = bound_records(&small)?;
    let conv = converge_result(&RunConfig {
        model: Model::Attn,
        data: "synthetic:128".into(),
        ..cfg.clone()
    })?;
    #[derive(Serialize)]
    struct Part {
        name: &'static str,
        pass: bool,
        total: usize,
        failed: usize,
    }
    let parts = [
        Part {
            name: "verify",
            pass: checks.iter().all(|r| r.pass),
            total: checks.len(),
            failed: checks.iter().filter(|r| !r.pass).count(),
        },
        Part {
            name: "bounds",
            pass: bounds.iter().all(|r| r.holds),
            total: bounds.len(),
            failed: bounds.iter().filter(|r| !r.holds).count(),
        },
        Part {
            name: "converge",
            pass: conv.trace.violations().is_empty(),
            total: conv.trace.records.len(),
            failed: conv.trace.violations().len(),
        },
    ];
    let pass = parts.iter().all(|p| p.pass);
    Ok(Outcome {
        report: json(cfg, pass, &parts),
        pass,
    })
}

pub fn execute(cfg: &RunConfig) -> Result<Outcome> {
    match cfg.command {
        Command::Verify => cmd_verify(cfg),
        Command::Bounds => cmd_bounds(cfg),
        Command::Converge => cmd_converge(cfg),
        Command::Selftest => cmd_selftest(cfg),
    }
}

/// Parses `argv`, runs the command, writes the report and returns the exit
/// code.
pub fn run<I, T>(argv: I, env_seed: Option<&str>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_PASS };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match RunConfig::from_args(args, env_seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("curvforge: {e}");
            return EXIT_CONFIG;
        }
    };
    let outcome = match execute(&cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("curvforge: {e}");
            return EXIT_CONFIG;
        }
    };
    let written = match &cfg.output {
        Some(path) => std::fs::write(path, &outcome.report),
        None => std::io::stdout().lock().write_all(outcome.report.as_bytes()),
    };
    if let Err(e) = written {
        eprintln!("curvforge: cannot write report: {e}");
        return EXIT_CONFIG;
    }
    if outcome.pass {
        EXIT_PASS
    } else {
        EXIT_FAIL
    }
}
