//! Batch front end: configuration, verbs and artifact writing.
//!
//! Every verb writes its tabular results as CSV and structured reports as
//! JSON into one output directory. Bodies depend only on the config and the
//! seed; the wall-clock time of the run goes into `manifest.json` alone.

pub mod config;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::json;

pub use config::{example_config, Format, MeasureName, ModelKind, RunConfig, SCHEMA};

use crate::error::{Error, Result};
use crate::functional_calculus::{
    brownian_battery, ito_residual, ito_residual_trace, subsample, write_residual_csv, QuadraticVariation,
};
use crate::market::{simulate, MarketModel, Measure};
use crate::policy_chain::{simulate_chain, write_events_csv};
use crate::reserve_engine::{
    reserve_functionals, verify_final_condition, Branch, ReserveEngine, ReserveReport, ThieleCheck,
};
use crate::rng::{StreamKey, DOMAIN_STUB};
use crate::stats::median;
use crate::stopped_paths::{functional, StoppedPath, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    Simulate,
    Reserve,
    CheckThiele,
    CheckIto,
    CheckCrossvalidate,
    SolvePremium,
}

impl Verb {
    pub const ALL: [Verb; 6] = [
        Verb::Simulate,
        Verb::Reserve,
        Verb::CheckThiele,
        Verb::CheckIto,
        Verb::CheckCrossvalidate,
        Verb::SolvePremium,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Verb::Simulate => "simulate",
            Verb::Reserve => "reserve",
            Verb::CheckThiele => "check-thiele",
            Verb::CheckIto => "check-ito",
            Verb::CheckCrossvalidate => "check-crossvalidate",
            Verb::SolvePremium => "solve-premium",
        }
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Verb {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Verb::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown verb {s:?}")))
    }
}

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitStatus {
    Ok,
    CheckFailed,
    ConfigError,
    RuntimeError,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Ok => 0,
            ExitStatus::CheckFailed => 1,
            ExitStatus::ConfigError => 2,
            ExitStatus::RuntimeError => 3,
        }
    }

    pub fn of_error(e: &Error) -> Self {
        match e {
            Error::Config(_) => ExitStatus::ConfigError,
            _ => ExitStatus::RuntimeError,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub status: ExitStatus,
    pub artifacts: Vec<PathBuf>,
    /// One-line human summary.
    pub summary: String,
}

struct Artifacts<'a> {
    dir: &'a Path,
    formats: &'a [Format],
    written: Vec<PathBuf>,
}

impl<'a> Artifacts<'a> {
    fn new(dir: &'a Path, formats: &'a [Format]) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir,
            formats,
            written: Vec::new(),
        })
    }

    fn file(&mut self, path: PathBuf, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut w = BufWriter::new(File::create(&path)?);
        body(&mut w)?;
        w.flush()?;
        self.written.push(path);
        Ok(())
    }

    fn raw(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        self.file(self.dir.join(name), body)
    }

    fn csv(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        if self.formats.contains(&Format::Csv) {
            self.raw(name, body)?;
        }
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        if self.formats.contains(&Format::Json) {
            write_json(self, name, value)?;
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(a: &mut Artifacts<'_>, name: &str, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    a.raw(name, |w| {
        writeln!(w, "{text}")?;
        Ok(())
    })
}

/// Runs one verb. Errors are returned for the caller to map onto exit
/// codes; failed checks come back as `Ok` with [`ExitStatus::CheckFailed`].
pub fn run(verb: Verb, cfg: &RunConfig, out_dir: &Path, out_file: Option<&Path>) -> Result<Outcome> {
    cfg.validate()?;
    let mut art = Artifacts::new(out_dir, &cfg.output.formats)?;
    let (status, summary) = match verb {
        Verb::Simulate => run_simulate(cfg, &mut art, out_file)?,
        Verb::Reserve => run_reserve(cfg, &mut art)?,
        Verb::CheckThiele => run_check_thiele(cfg, &mut art)?,
        Verb::CheckIto => run_check_ito(cfg, &mut art)?,
        Verb::CheckCrossvalidate => run_crossvalidate(cfg, &mut art)?,
        Verb::SolvePremium => run_solve_premium(cfg, &mut art)?,
    };
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis());
    let names: Vec<String> = art
        .written
        .iter()
        .map(|p| p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned()))
        .collect();
    let manifest = json!({
        "schema": SCHEMA,
        "verb": verb.name(),
        "seed": cfg.numerics.seed,
        "status": status,
        "summary": summary,
        "artifacts": names,
        "created_unix_ms": created as u64,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_json(&mut art, "manifest.json", &manifest)?;
    Ok(Outcome {
        status,
        artifacts: art.written,
        summary,
    })
}

/// Realized asset histories under P, one per stub, keyed independently of
/// every simulation stream.
pub fn history_stubs(model: &MarketModel, grid: &TimeGrid, n: usize, seed: u64) -> Result<Vec<StoppedPath>> {
    let start = StoppedPath::constant(grid.clone(), model.s0, 0)?;
    let key = StreamKey::new(seed, DOMAIN_STUB);
    (0..n)
        .map(|k| model.continuation(&start, grid.steps(), Measure::P, key, k as u64, 1.0))
        .collect()
}

fn time_indices(cfg: &RunConfig, grid: &TimeGrid) -> Result<Vec<usize>> {
    cfg.numerics
        .times
        .iter()
        .map(|&t| {
            grid.index_of(t)
                .ok_or_else(|| Error::Config(format!("numerics.times: {t} is not a grid node")))
        })
        .collect()
}

fn engine(cfg: &RunConfig, premium: f64) -> Result<ReserveEngine> {
    ReserveEngine::new(
        cfg.market_model()?,
        cfg.chain_model()?,
        cfg.cashflow_spec(premium)?,
        cfg.grid()?,
        cfg.engine_config(),
    )
}

fn run_simulate(cfg: &RunConfig, art: &mut Artifacts<'_>, out_file: Option<&Path>) -> Result<(ExitStatus, String)> {
    let n = &cfg.numerics;
    let model = cfg.market_model()?;
    let grid = cfg.grid()?;
    let batch = simulate(&model, &grid, n.paths, n.measure.into(), n.seed)?;
    match out_file {
        Some(path) if path.extension().is_some_and(|e| e == "bin") => {
            art.file(path.to_path_buf(), |w| batch.write_cache(w))?;
        }
        Some(path) => art.file(path.to_path_buf(), |w| batch.write_csv(w))?,
        None => {
            art.csv("paths.csv", |w| batch.write_csv(w))?;
            art.raw("paths.bin", |w| batch.write_cache(w))?;
        }
    }
    let chain = cfg.chain_model()?;
    if chain.states() > 1 {
        let traj = simulate_chain(&chain, &grid, n.paths, n.seed)?;
        art.csv("events.csv", |w| write_events_csv(&traj, w))?;
    }
    Ok((
        ExitStatus::Ok,
        format!("simulated {} paths on {} steps under {}", n.paths, grid.steps(), Measure::from(n.measure)),
    ))
}

fn run_reserve(cfg: &RunConfig, art: &mut Artifacts<'_>) -> Result<(ExitStatus, String)> {
    let e = engine(cfg, 1.0)?;
    let grid = e.grid().clone();
    let stub = history_stubs(e.model(), &grid, 1, cfg.numerics.seed)?.remove(0);
    let mut report = ReserveReport::default();
    for j in time_indices(cfg, &grid)? {
        report.rows.extend(e.reserve_res2_all(&stub.stop_at_index(j)?)?);
    }
    art.csv("reserve.csv", |w| report.write_csv(w))?;
    art.json("reserve.json", &report)?;
    let heavy = report.rows.iter().filter(|r| r.heavy_tail).count();
    Ok((
        ExitStatus::Ok,
        format!("{} reserve rows, {heavy} heavy-tailed", report.rows.len()),
    ))
}

#[derive(Debug, Clone, Serialize)]
struct ThieleRow {
    stub: usize,
    #[serde(flatten)]
    check: ThieleCheck,
    bound: f64,
    pass: bool,
}

/// Analytic residual tolerance.
pub const ANALYTIC_TOL: f64 = 1e-6;
/// Monte Carlo residuals must stay below this many (SE + truncation).
pub const MC_FACTOR: f64 = 5.0;
/// res1 and res2 must agree within this many combined standard errors.
pub const CROSS_Z: f64 = 4.0;

fn run_check_thiele(cfg: &RunConfig, art: &mut Artifacts<'_>) -> Result<(ExitStatus, String)> {
    let e = std::sync::Arc::new(engine(cfg, 1.0)?);
    let grid = e.grid().clone();
    let stubs = history_stubs(e.model(), &grid, cfg.numerics.stubs.max(1), cfg.numerics.seed)?;
    let analytic = cfg.numerics.closed_forms && e.oracle_reserve(&stubs[0].stop_at_index(0)?).is_ok();
    let mut rows = Vec::new();
    for (k, stub) in stubs.iter().enumerate() {
        for j in time_indices(cfg, &grid)?.into_iter().filter(|&j| j < grid.steps()) {
            let sp = stub.stop_at_index(j)?;
            for i in 0..e.spec().states() {
                let check = if analytic {
                    e.thiele_residual_analytic(i, &sp)?
                } else {
                    e.thiele_residual_mc(i, &sp)?
                };
                let bound = match check.branch {
                    Branch::Analytic => ANALYTIC_TOL,
                    Branch::MonteCarlo => MC_FACTOR * (check.std_error + check.truncation),
                };
                // A residual of exactly zero passes even against a zero bound.
                let pass = check.residual.abs() <= bound;
                rows.push(ThieleRow {
                    stub: k,
                    check,
                    bound,
                    pass,
                });
            }
        }
    }
    let final_report = verify_final_condition(&reserve_functionals(&e, analytic), &stubs, 1e-12)?;
    art.csv("thiele.csv", |w| {
        writeln!(w, "state,time,stub,residual,std_error,truncation,bound,branch,pass")?;
        for r in &rows {
            let c = &r.check;
            let branch = match c.branch {
                Branch::Analytic => "analytic",
                Branch::MonteCarlo => "monte-carlo",
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                c.state, c.time, r.stub, c.residual, c.std_error, c.truncation, r.bound, branch, r.pass
            )?;
        }
        Ok(())
    })?;
    let failures: Vec<_> = rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| json!({"state": r.check.state, "time": r.check.time, "stub": r.stub, "residual": r.check.residual, "bound": r.bound}))
        .chain(
            final_report
                .violations
                .iter()
                .map(|&(state, stub, v)| json!({"state": state, "time": grid.horizon(), "stub": stub, "residual": v, "bound": final_report.tolerance})),
        )
        .collect();
    art.json("thiele.json", &json!({"rows": rows, "final_condition": final_report}))?;
    write_json(art, "failures.json", &json!({"verb": "check-thiele", "failures": failures}))?;
    let worst = rows.iter().map(|r| r.check.residual.abs()).fold(0.0, f64::max);
    let status = if failures.is_empty() { ExitStatus::Ok } else { ExitStatus::CheckFailed };
    Ok((
        status,
        format!("{} residuals, {} failures, max |residual| {worst:.3e}", rows.len(), failures.len()),
    ))
}

#[derive(Debug, Clone, Serialize)]
struct ItoRow {
    functional: &'static str,
    steps: usize,
    median_residual: f64,
    max_residual: f64,
}

fn run_check_ito(cfg: &RunConfig, art: &mut Artifacts<'_>) -> Result<(ExitStatus, String)> {
    let n = &cfg.numerics;
    let finest = n.steps;
    let levels: Vec<usize> = [8, 4, 2, 1].into_iter().filter(|s| finest % s == 0 && finest / s >= 2).collect();
    if levels.len() < 2 {
        return Err(Error::Config(format!("numerics.steps: {finest} gives fewer than two refinement levels")));
    }
    let paths = brownian_battery(n.horizon, finest, n.paths.max(1), n.seed)?;
    let endpoint = crate::payoffs::Payoff::Endpoint { scale: 1.0 }.into_functional();
    let square = functional("square", |p| p.last() * p.last());
    let qv = QuadraticVariation::Rate(1.0);
    let mut rows = Vec::new();
    for &stride in &levels {
        let coarse = paths.iter().map(|p| subsample(p, stride)).collect::<Result<Vec<_>>>()?;
        for (name, f) in [("endpoint", &endpoint), ("square", &square)] {
            let res = coarse
                .iter()
                .map(|p| ito_residual(f.as_ref(), p, 1e-4, qv))
                .collect::<Result<Vec<_>>>()?;
            rows.push(ItoRow {
                functional: name,
                steps: finest / stride,
                median_residual: median(&res),
                max_residual: res.iter().copied().fold(0.0, f64::max),
            });
        }
    }
    let mut failures = Vec::new();
    for r in rows.iter().filter(|r| r.functional == "endpoint" && !(r.max_residual < 1e-12)) {
        failures.push(json!({"functional": r.functional, "steps": r.steps, "residual": r.max_residual, "bound": 1e-12}));
    }
    let sq: Vec<&ItoRow> = rows.iter().filter(|r| r.functional == "square").collect();
    for w in sq.windows(2) {
        if !(w[1].median_residual < w[0].median_residual) {
            failures.push(json!({"functional": "square", "steps": w[1].steps, "residual": w[1].median_residual, "bound": w[0].median_residual}));
        }
    }
    art.csv("ito.csv", |w| {
        writeln!(w, "functional,steps,median_residual,max_residual")?;
        for r in &rows {
            writeln!(w, "{},{},{},{}", r.functional, r.steps, r.median_residual, r.max_residual)?;
        }
        Ok(())
    })?;
    let trace = ito_residual_trace(square.as_ref(), &paths[0], 1e-4, qv)?;
    art.csv("ito_trace.csv", |w| write_residual_csv(&trace, w))?;
    art.json("ito.json", &rows)?;
    write_json(art, "failures.json", &json!({"verb": "check-ito", "failures": failures}))?;
    let status = if failures.is_empty() { ExitStatus::Ok } else { ExitStatus::CheckFailed };
    Ok((status, format!("{} Itô rows, {} failures", rows.len(), failures.len())))
}

#[derive(Debug, Clone, Serialize)]
struct CrossRow {
    state: usize,
    time: f64,
    res1: f64,
    res1_se: f64,
    res2: f64,
    res2_se: f64,
    z: f64,
    pass: bool,
}

fn run_crossvalidate(cfg: &RunConfig, art: &mut Artifacts<'_>) -> Result<(ExitStatus, String)> {
    let e = engine(cfg, 1.0)?;
    let grid = e.grid().clone();
    let n = &cfg.numerics;
    let stub = history_stubs(e.model(), &grid, 1, n.seed)?.remove(0);
    let mut rows = Vec::new();
    for j in time_indices(cfg, &grid)? {
        let sp = stub.stop_at_index(j)?;
        let res2 = e.reserve_res2_all(&sp)?;
        for r2 in res2 {
            let r1 = e.reserve_res1_direct(r2.state, &sp, n.n_outer, n.seed)?;
            let diff = (r1.value - r2.value).abs();
            let se = r1.std_error.hypot(r2.std_error);
            let z = if se > 0.0 {
                diff / se
            } else if diff <= 1e-9 * r2.value.abs().max(1.0) {
                0.0
            } else {
                f64::INFINITY
            };
            rows.push(CrossRow {
                state: r2.state,
                time: r2.time,
                res1: r1.value,
                res1_se: r1.std_error,
                res2: r2.value,
                res2_se: r2.std_error,
                z,
                pass: z < CROSS_Z,
            });
        }
    }
    art.csv("crossvalidate.csv", |w| {
        writeln!(w, "state,time,res1,res1_se,res2,res2_se,z,pass")?;
        for r in &rows {
            writeln!(w, "{},{},{},{},{},{},{},{}", r.state, r.time, r.res1, r.res1_se, r.res2, r.res2_se, r.z, r.pass)?;
        }
        Ok(())
    })?;
    art.json("crossvalidate.json", &rows)?;
    let failures: Vec<_> = rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| json!({"state": r.state, "time": r.time, "residual": r.res1 - r.res2, "z": r.z}))
        .collect();
    write_json(art, "failures.json", &json!({"verb": "check-crossvalidate", "failures": failures}))?;
    let max_z = rows.iter().map(|r| r.z).fold(0.0, f64::max);
    let status = if failures.is_empty() { ExitStatus::Ok } else { ExitStatus::CheckFailed };
    Ok((status, format!("{} comparisons, max z {max_z:.3}", rows.len())))
}

/// Premium level `π` making the entry reserve of the initial state vanish,
/// by secant iteration on `π ↦ V_{z0}(0; π)`. Common inner streams make
/// the map affine in `π`, so the iteration settles after one update.
pub fn solve_premium(cfg: &RunConfig) -> Result<(f64, f64, usize)> {
    if !cfg.has_premium() {
        return Err(Error::Config("cashflow: no entry is marked premium = true".into()));
    }
    let z0 = cfg.chain.z0;
    let grid = cfg.grid()?;
    let stub = StoppedPath::constant(grid, cfg.market.s0, 0)?;
    let value = |p: f64| -> Result<f64> { Ok(engine(cfg, p)?.reserve_res2(z0, &stub)?.value) };
    let (mut p0, mut p1) = (0.0, 1.0);
    let (mut f0, mut f1) = (value(p0)?, value(p1)?);
    let tol = 1e-10 * f0.abs().max(1.0);
    for it in 1..=50 {
        if f1.abs() <= tol {
            return Ok((p1, f1, it));
        }
        if f1 == f0 {
            return Err(Error::Simulation {
                path: 0,
                node: 0,
                reason: "premium legs have no effect on the entry reserve".into(),
            });
        }
        let p2 = p1 - f1 * (p1 - p0) / (f1 - f0);
        (p0, f0) = (p1, f1);
        p1 = p2;
        f1 = value(p1)?;
    }
    Err(Error::Simulation {
        path: 0,
        node: 0,
        reason: format!("premium search did not converge; last residual {f1}"),
    })
}

fn run_solve_premium(cfg: &RunConfig, art: &mut Artifacts<'_>) -> Result<(ExitStatus, String)> {
    let (premium, reserve, iterations) = solve_premium(cfg)?;
    art.csv("premium.csv", |w| {
        writeln!(w, "premium,reserve,iterations")?;
        writeln!(w, "{premium},{reserve},{iterations}")?;
        Ok(())
    })?;
    art.json(
        "premium.json",
        &json!({"premium": premium, "reserve": reserve, "iterations": iterations, "state": cfg.chain.z0}),
    )?;
    Ok((ExitStatus::Ok, format!("premium {premium}")))
}
