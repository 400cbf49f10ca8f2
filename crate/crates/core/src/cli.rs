//! Command-line front end. Every command writes either a JSON [`RunReport`]
//! or CSV to the given writer and returns whether the domain checks passed.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::basins::{BasinContext, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::conjugate::{conditioned_law_mc, tilt, verify_tilt_back};
use crate::countable::{check_assumptions, truncation_scan, CountableFamily};
use crate::error::{Error, Result};
use crate::fixedpoint::{default_grid, find_fixed_points, residual_grid, verify_fixed_point, FinderOptions, ACCEPT_TOL};
use crate::model::ProcessModel;
use crate::simulate::{for_each_batch, summarize, SimConfig, Status, DEFAULT_POP_CAP};
use crate::spectral::analyze;

#[derive(Debug, Parser)]
#[command(name = "bpconj", version, about = "Fixed points and conjugates of multi-type branching processes")]
pub struct Cli {
    /// Add wall-clock time to JSON reports (makes output non-reproducible).
    #[arg(long, global = true)]
    pub timing: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct SearchArgs {
    /// Mesh points per axis (default depends on the number of types).
    #[arg(long)]
    pub grid: Option<usize>,
    /// Ray bracket tolerance.
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    /// Orbit length budget for basin classification.
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    #[arg(long, default_value_t = crate::fixedpoint::DEFAULT_DEDUP_RADIUS)]
    pub dedup_radius: f64,
}

impl SearchArgs {
    fn options(&self, d: usize) -> FinderOptions {
        FinderOptions {
            grid_per_axis: self.grid.unwrap_or_else(|| default_grid(d)),
            tol: self.tol,
            dedup_radius: self.dedup_radius,
            max_iters: self.max_iters,
            extra_seeds: Vec::new(),
        }
    }
}

#[derive(Debug, Args, Clone)]
pub struct TargetArgs {
    /// Index into the fixed-point list (lexicographic order).
    #[arg(long, default_value_t = 0, conflicts_with = "a")]
    pub fixed_point_index: usize,
    /// Use this fixed point instead of searching (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub a: Option<Vec<f64>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the hypotheses; exit 1 names the failing one.
    Validate { model: PathBuf },
    /// Mean matrix, Perron root, regularity and witnesses.
    Analyze { model: PathBuf },
    /// Classify a point into the basin of 0 or of infinity.
    Basin {
        model: PathBuf,
        /// Log-space point `λ` (comma-separated).
        #[arg(long, value_delimiter = ',', required_unless_present = "q", conflicts_with = "q")]
        lambda: Option<Vec<f64>>,
        /// Point `q = exp(λ)` (comma-separated).
        #[arg(long, value_delimiter = ',')]
        q: Option<Vec<f64>>,
        #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
        max_iters: usize,
    },
    /// CSV of ray brackets of the unstable set on the direction mesh.
    Mesh {
        model: PathBuf,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Fixed points of the generating function in (1,∞)^d.
    FixedPoints {
        model: PathBuf,
        #[command(flatten)]
        search: SearchArgs,
        /// Write (q1, q2, f1 − q1, f2 − q2) on a grid to this CSV file.
        #[arg(long)]
        emit_residual_grid: Option<PathBuf>,
        #[arg(long, default_value_t = 201)]
        residual_grid_n: usize,
        #[arg(long, default_value_t = 1.0)]
        residual_grid_lo: f64,
        #[arg(long, default_value_t = 2.5)]
        residual_grid_hi: f64,
    },
    /// Write the conjugate (tilted) model file.
    Conjugate {
        model: PathBuf,
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        search: SearchArgs,
        /// Output path for the tilted model (stdout when absent).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Tilt-back identity and Monte Carlo check of the conditioned law.
    VerifyConjugate {
        model: PathBuf,
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        search: SearchArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        replicas: u64,
        #[arg(long, default_value_t = 60)]
        generations: usize,
        #[arg(long, default_value_t = 0)]
        start_type: usize,
    },
    /// validate → analyze → fixed-points → conjugate → tilt-back.
    Pipeline {
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        fixed_point_index: usize,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Seeded forward simulation as CSV.
    Simulate {
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        start_type: usize,
        #[arg(long)]
        generations: usize,
        #[arg(long, default_value_t = DEFAULT_POP_CAP)]
        pop_cap: u64,
        #[arg(long)]
        replicas: u64,
        #[arg(long)]
        seed: u64,
        /// Keep only replicas that went extinct.
        #[arg(long)]
        condition_extinct: bool,
        /// One row per generation instead of one per (replica, generation).
        #[arg(long)]
        summary: bool,
    },
    /// Fixed points along a schedule of truncations of a countable family.
    TruncateScan {
        family: PathBuf,
        /// Largest truncation level; defaults to the family's d_max.
        #[arg(long)]
        dmax: Option<usize>,
        /// Truncation levels (comma-separated); defaults to powers of two up to dmax.
        #[arg(long, value_delimiter = ',')]
        schedule: Option<Vec<usize>>,
        #[command(flatten)]
        search: SearchArgs,
    },
}

/// Machine-readable result of one command.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub version: String,
    /// SHA-256 of the input file bytes.
    pub inputs_digest: String,
    pub parameters: Value,
    pub outputs: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<u64>,
}

/// How a successful run ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// A domain check failed (exit code 1).
    Failure,
}

/// Exit code for an error: 2 for input, parse and usage problems, 1 for
/// domain failures.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_)
        | Error::Json(_)
        | Error::Parse(_)
        | Error::InvalidModel(_)
        | Error::InvalidArgument(_)
        | Error::DimensionMismatch { .. } => 2,
        _ => 1,
    }
}

struct Input {
    bytes: Vec<u8>,
}

impl Input {
    fn read(path: &Path) -> Result<Self> {
        Ok(Input { bytes: std::fs::read(path)? })
    }

    fn text(&self) -> Result<&str> {
        std::str::from_utf8(&self.bytes).map_err(|e| Error::Parse(format!("input is not UTF-8: {e}")))
    }

    fn model(&self) -> Result<ProcessModel> {
        ProcessModel::from_json_str(self.text()?)
    }

    fn digest(&self) -> String {
        hex::encode(Sha256::digest(&self.bytes))
    }
}

struct Reporter<'a> {
    command: &'static str,
    timing: bool,
    started: Instant,
    out: &'a mut dyn Write,
}

impl Reporter<'_> {
    fn emit(&mut self, input: &Input, parameters: Value, outputs: Value) -> Result<()> {
        let report = RunReport {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs_digest: input.digest(),
            parameters,
            outputs,
            wall_time_ms: self.timing.then(|| self.started.elapsed().as_millis() as u64),
        };
        serde_json::to_writer_pretty(&mut *self.out, &report)?;
        writeln!(self.out)?;
        Ok(())
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Validate { .. } => "validate",
        Command::Analyze { .. } => "analyze",
        Command::Basin { .. } => "basin",
        Command::Mesh { .. } => "mesh",
        Command::FixedPoints { .. } => "fixed-points",
        Command::Conjugate { .. } => "conjugate",
        Command::VerifyConjugate { .. } => "verify-conjugate",
        Command::Pipeline { .. } => "pipeline",
        Command::Simulate { .. } => "simulate",
        Command::TruncateScan { .. } => "truncate-scan",
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

/// Fixed point selected by `--a` or by index into the search result.
fn select_fixed_point(model: &ProcessModel, target: &TargetArgs, search: &SearchArgs) -> Result<Vec<f64>> {
    if let Some(a) = &target.a {
        return Ok(a.clone());
    }
    let report = find_fixed_points(model, &search.options(model.d()))?;
    pick(&report.points.iter().map(|p| p.q.clone()).collect::<Vec<_>>(), target.fixed_point_index)
}

fn pick(points: &[Vec<f64>], index: usize) -> Result<Vec<f64>> {
    points.get(index).cloned().ok_or_else(|| {
        let available = if points.is_empty() {
            "none".to_string()
        } else {
            (0..points.len()).map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
        };
        Error::InvalidArgument(format!("fixed-point index {index} out of range; available indices: {available}"))
    })
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<Outcome> {
    let mut rep = Reporter { command: command_name(&cli.command), timing: cli.timing, started: Instant::now(), out };
    match &cli.command {
        Command::Validate { model } => {
            let input = Input::read(model)?;
            let m = input.model()?;
            let report = analyze(&m)?;
            let mut failures = report.failures();
            if failures.is_empty() && report.gf_bded.is_none() {
                failures.push("no bounded witness q0 (practical subcriticality margin)".into());
            }
            if failures.is_empty() && report.gf_pos.is_none() {
                failures.push("no positivity witness".into());
            }
            let pass = failures.is_empty();
            rep.emit(
                &input,
                json!({}),
                json!({
                    "pass": pass,
                    "failures": failures,
                    "rho": report.rho,
                    "criticality": report.criticality,
                    "hypotheses": report.hypotheses,
                    "warnings": report.warnings,
                }),
            )?;
            Ok(if pass { Outcome::Success } else { Outcome::Failure })
        }
        Command::Analyze { model } => {
            let input = Input::read(model)?;
            let report = analyze(&input.model()?)?;
            rep.emit(&input, json!({}), to_value(&report))?;
            Ok(Outcome::Success)
        }
        Command::Basin { model, lambda, q, max_iters } => {
            let input = Input::read(model)?;
            let m = input.model()?;
            let point = match (lambda, q) {
                (Some(l), _) => l.clone(),
                (None, Some(q)) => {
                    if q.iter().any(|&x| !(x >= 1.0)) {
                        return Err(Error::InvalidArgument("q must be ≥ 1 componentwise".into()));
                    }
                    q.iter().map(|x| x.ln()).collect()
                }
                (None, None) => return Err(Error::InvalidArgument("give --lambda or --q".into())),
            };
            let ctx = BasinContext::new(&m)?;
            let verdict = ctx.classify(&point, *max_iters)?;
            let revalidated = ctx.revalidate(&point, &verdict);
            rep.emit(
                &input,
                json!({ "lambda": point, "max_iters": max_iters }),
                json!({ "verdict": verdict, "revalidated": revalidated }),
            )?;
            Ok(Outcome::Success)
        }
        Command::Mesh { model, search } => {
            let input = Input::read(model)?;
            let m = input.model()?;
            let ctx = BasinContext::new(&m)?;
            let opts = search.options(m.d());
            let mesh = ctx.lambda_mesh(opts.grid_per_axis, opts.tol, opts.max_iters)?;
            let mut w = csv::Writer::from_writer(&mut *rep.out);
            let mut header: Vec<String> = (0..m.d()).map(|j| format!("u{j}")).collect();
            header.extend(["r", "r_lo", "r_hi", "lo_certificate", "hi_certificate"].map(String::from));
            w.write_record(&header).map_err(csv_error)?;
            for p in &mesh.points {
                let kind = |v: &crate::basins::BasinVerdict| {
                    v.certificate.map(|c| format!("{:?}", c.kind)).unwrap_or_default()
                };
                let mut row: Vec<String> = p.u.iter().map(|x| x.to_string()).collect();
                row.extend([p.r.to_string(), p.r_lo.to_string(), p.r_hi.to_string(), kind(&p.lo_verdict), kind(&p.hi_verdict)]);
                w.write_record(&row).map_err(csv_error)?;
            }
            w.flush()?;
            for f in &mesh.failures {
                eprintln!("ray {:?} failed: {}", f.u, f.error);
            }
            Ok(if mesh.failures.is_empty() { Outcome::Success } else { Outcome::Failure })
        }
        Command::FixedPoints {
            model,
            search,
            emit_residual_grid,
            residual_grid_n,
            residual_grid_lo,
            residual_grid_hi,
        } => {
            let input = Input::read(model)?;
            let m = input.model()?;
            let opts = search.options(m.d());
            let report = find_fixed_points(&m, &opts)?;
            if let Some(path) = emit_residual_grid {
                let rows = residual_grid(&m, *residual_grid_lo, *residual_grid_hi, *residual_grid_n)?;
                let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
                w.write_record(["q1", "q2", "f1_minus_q1", "f2_minus_q2"]).map_err(csv_error)?;
                for r in rows {
                    w.write_record(r.iter().map(|x| x.to_string())).map_err(csv_error)?;
                }
                w.flush()?;
            }
            let contradicts = report.contradicts_theorem;
            rep.emit(&input, to_value(&opts), to_value(&report))?;
            Ok(if contradicts { Outcome::Failure } else { Outcome::Success })
        }
        Command::Conjugate { model, target, search, output } => {
            let input = Input::read(model)?;
            let m = input.model()?;
            let a = select_fixed_point(&m, target, search)?;
            let conj = tilt(&m, &a)?;
            let text = conj.tilted.to_json_string();
            match output {
                Some(path) => {
                    std::fs::write(path, format!("{text}\n"))?;
                    rep.emit(
                        &input,
                        json!({ "fixed_point_index": target.fixed_point_index, "a": target.a }),
                        json!({ "conjugate": conj.summary(), "written_to": path }),
                    )?;
                }
                None => writeln!(rep.out, "{text}")?,
            }
            Ok(Outcome::Success)
        }
        Command::VerifyConjugate { model, target, search, seed, replicas, generations, start_type } => {
            let input = Input::read(model)?;
            let m = input.model()?;
            let a = select_fixed_point(&m, target, search)?;
            let conj = tilt(&m, &a)?;
            let tilt_back = verify_tilt_back(&conj)?;
            let mc = conditioned_law_mc(&conj, *start_type, *generations, *replicas, *seed)?;
            let passed = tilt_back.passed;
            rep.emit(
                &input,
                json!({
                    "fixed_point_index": target.fixed_point_index,
                    "a": target.a,
                    "seed": seed,
                    "replicas": replicas,
                    "generations": generations,
                    "start_type": start_type,
                }),
                json!({ "conjugate": conj.summary(), "tilt_back": tilt_back, "conditioned_law": mc }),
            )?;
            Ok(if passed { Outcome::Success } else { Outcome::Failure })
        }
        Command::Pipeline { model, fixed_point_index, search } => {
            let input = Input::read(model)?;
            let m = input.model()?;
            let report = analyze(&m)?;
            let failures = report.failures();
            if !failures.is_empty() {
                return Err(Error::HypothesisViolation(failures.join("; ")));
            }
            let opts = search.options(m.d());
            let fixed = find_fixed_points(&m, &opts)?;
            let points: Vec<Vec<f64>> = fixed.points.iter().map(|p| p.q.clone()).collect();
            let a = pick(&points, *fixed_point_index)?;
            let validation = verify_fixed_point(&m, &a, ACCEPT_TOL)?;
            let conj = tilt(&m, &a)?;
            let tilt_back = verify_tilt_back(&conj)?;
            let passed = tilt_back.passed;
            rep.emit(
                &input,
                json!({ "fixed_point_index": fixed_point_index, "search": opts }),
                json!({
                    "analysis": report,
                    "fixed_points": fixed,
                    "selected": validation,
                    "conjugate": conj.summary(),
                    "conjugate_model": conj.tilted.to_file(),
                    "tilt_back": tilt_back,
                }),
            )?;
            Ok(if passed { Outcome::Success } else { Outcome::Failure })
        }
        Command::Simulate { model, start_type, generations, pop_cap, replicas, seed, condition_extinct, summary } => {
            let input = Input::read(model)?;
            let m = input.model()?;
            let cfg = SimConfig {
                start_type: *start_type,
                generations: *generations,
                pop_cap: *pop_cap,
                replicas: *replicas,
                seed: *seed,
            };
            cfg.validate(&m)?;
            let d = m.d();
            let keep = |t: &crate::simulate::Trajectory| !*condition_extinct || t.status == Status::Extinct;
            let mut w = csv::Writer::from_writer(&mut *rep.out);
            if *summary {
                let (selected, rows) = summarize(&m, &cfg, keep)?;
                let mut header = vec!["generation".to_string(), "replicas".into(), "recorded".into(), "extinct".into()];
                header.extend((0..d).map(|j| format!("mean_x{j}")));
                w.write_record(&header).map_err(csv_error)?;
                for r in rows {
                    let mut row = vec![
                        r.generation.to_string(),
                        selected.to_string(),
                        r.recorded.to_string(),
                        r.extinct_by_now.to_string(),
                    ];
                    row.extend(r.mean_counts.iter().map(|x| x.to_string()));
                    w.write_record(&row).map_err(csv_error)?;
                }
            } else {
                let mut header = vec!["replica".to_string(), "generation".into(), "status".into()];
                header.extend((0..d).map(|j| format!("x{j}")));
                w.write_record(&header).map_err(csv_error)?;
                let mut result = Ok(());
                for_each_batch(&m, &cfg, |start, batch| {
                    for (i, t) in batch.iter().enumerate() {
                        if !keep(t) {
                            continue;
                        }
                        let status = format!("{:?}", t.status);
                        for (n, x) in t.counts.iter().enumerate() {
                            let mut row = vec![(start + i as u64).to_string(), n.to_string(), status.clone()];
                            row.extend(x.iter().map(|c| c.to_string()));
                            if let Err(e) = w.write_record(&row) {
                                result = Err(csv_error(e));
                                return Ok(());
                            }
                        }
                    }
                    Ok(())
                })?;
                result?;
            }
            w.flush()?;
            Ok(Outcome::Success)
        }
        Command::TruncateScan { family, dmax, schedule, search } => {
            let input = Input::read(family)?;
            let fam = CountableFamily::from_json_str(input.text()?)?;
            let dmax = dmax.unwrap_or(fam.d_max());
            if dmax == 0 || dmax > fam.d_max() {
                return Err(Error::InvalidArgument(format!("--dmax must lie in 1..={}", fam.d_max())));
            }
            let schedule = match schedule {
                Some(s) => s.clone(),
                None => {
                    let mut s: Vec<usize> = std::iter::successors(Some(2usize), |x| Some(x * 2)).take_while(|&x| x <= dmax).collect();
                    if s.last() != Some(&dmax) {
                        s.push(dmax);
                    }
                    s
                }
            };
            if let Some(&too_big) = schedule.iter().find(|&&d| d > dmax) {
                return Err(Error::InvalidArgument(format!("schedule entry {too_big} exceeds --dmax {dmax}")));
            }
            let opts = FinderOptions { grid_per_axis: search.grid.unwrap_or(2), ..search.options(2) };
            let scan = truncation_scan(&fam, &schedule, &opts)?;
            let assumptions = check_assumptions(&fam);
            let ok = scan.aborted.is_none();
            rep.emit(
                &input,
                json!({ "dmax": dmax, "schedule": schedule, "search": opts }),
                json!({ "scan": scan, "assumptions": assumptions }),
            )?;
            Ok(if ok { Outcome::Success } else { Outcome::Failure })
        }
    }
}
