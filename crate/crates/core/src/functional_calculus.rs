//! Horizontal and vertical derivatives of path functionals, the discrete
//! functional Itô formula and the path-dependent PDE residual.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::par;
use crate::rng::{StreamKey, DOMAIN_STUB};
use crate::stopped_paths::{PathFunctional, StoppedPath, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Forward,
    Central,
    SecondCentral,
    Analytic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeEstimate {
    pub value: f64,
    pub bump_size: f64,
    pub scheme: Scheme,
}

/// `(DF, ∇_ω F, ∇²_ω F)` at one stopped path.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Derivatives {
    pub horizontal: f64,
    pub vertical: f64,
    pub second_vertical: f64,
}

/// Bump sizes for the numeric estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bumps {
    /// Relative vertical bump: `h = rel · max(1, |ω(t)|)`.
    pub vertical_rel: f64,
    /// Horizontal extension in grid steps.
    pub horizontal_steps: usize,
}

impl Default for Bumps {
    fn default() -> Self {
        Self {
            vertical_rel: 1e-4,
            horizontal_steps: 1,
        }
    }
}

impl Bumps {
    pub fn vertical_size(&self, sp: &StoppedPath) -> f64 {
        self.vertical_rel * sp.last().abs().max(1.0)
    }
}

/// Default vertical bump `1e-4 · max(1, |ω(t)|)`.
pub fn default_vertical_bump(sp: &StoppedPath) -> f64 {
    Bumps::default().vertical_size(sp)
}

/// Forward difference `(F(t+h, ω_t) − F(t, ω_t)) / h`; `h` is rounded down
/// to the grid.
pub fn horizontal_derivative(
    f: &dyn PathFunctional,
    sp: &StoppedPath,
    h: f64,
) -> Result<DerivativeEstimate> {
    if h <= 0.0 {
        return Err(domain(format!("horizontal bump must be positive, got {h}")));
    }
    let ext = sp.horizontal_extend(h)?;
    if ext.stop_index() == sp.stop_index() {
        return Err(domain(format!("horizontal bump {h} is smaller than one grid step")));
    }
    forward_difference(f, sp, &ext)
}

/// Forward difference over `steps` grid steps.
pub fn horizontal_derivative_steps(
    f: &dyn PathFunctional,
    sp: &StoppedPath,
    steps: usize,
) -> Result<DerivativeEstimate> {
    if steps == 0 {
        return Err(domain("horizontal extension needs at least one step"));
    }
    let ext = sp.extend_to_index(sp.stop_index() + steps)?;
    forward_difference(f, sp, &ext)
}

fn forward_difference(
    f: &dyn PathFunctional,
    sp: &StoppedPath,
    ext: &StoppedPath,
) -> Result<DerivativeEstimate> {
    let dt = ext.stop_time() - sp.stop_time();
    Ok(DerivativeEstimate {
        value: (f.eval(ext) - f.eval(sp)) / dt,
        bump_size: dt,
        scheme: Scheme::Forward,
    })
}

fn check_vertical(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(domain(format!("vertical bump must be positive, got {h}")))
    }
}

/// Central difference in the direction `1_{[t,T]}`.
pub fn vertical_derivative(
    f: &dyn PathFunctional,
    sp: &StoppedPath,
    h: f64,
) -> Result<DerivativeEstimate> {
    check_vertical(h)?;
    let up = f.eval(&sp.vertical_bump(h));
    let down = f.eval(&sp.vertical_bump(-h));
    Ok(DerivativeEstimate {
        value: (up - down) / (2.0 * h),
        bump_size: h,
        scheme: Scheme::Central,
    })
}

/// Three-point stencil for `∇²_ω F`.
pub fn second_vertical_derivative(
    f: &dyn PathFunctional,
    sp: &StoppedPath,
    h: f64,
) -> Result<DerivativeEstimate> {
    check_vertical(h)?;
    let up = f.eval(&sp.vertical_bump(h));
    let mid = f.eval(sp);
    let down = f.eval(&sp.vertical_bump(-h));
    Ok(DerivativeEstimate {
        value: (up - 2.0 * mid + down) / (h * h),
        bump_size: h,
        scheme: Scheme::SecondCentral,
    })
}

/// All three derivatives, analytic when `f` provides them.
///
/// At the horizon the horizontal derivative is reported as zero; nothing
/// past `T` exists to extend into.
pub fn derivatives(f: &dyn PathFunctional, sp: &StoppedPath, bumps: &Bumps) -> Result<Derivatives> {
    if let Some(d) = f.analytic_derivatives(sp) {
        return Ok(d);
    }
    let h = bumps.vertical_size(sp);
    let horizontal = if sp.is_complete() {
        0.0
    } else {
        let steps = bumps
            .horizontal_steps
            .min(sp.grid().steps() - sp.stop_index());
        horizontal_derivative_steps(f, sp, steps)?.value
    };
    let up = f.eval(&sp.vertical_bump(h));
    let mid = f.eval(sp);
    let down = f.eval(&sp.vertical_bump(-h));
    Ok(Derivatives {
        horizontal,
        vertical: (up - down) / (2.0 * h),
        second_vertical: (up - 2.0 * mid + down) / (h * h),
    })
}

/// Increments of the quadratic-variation process used in the Itô sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuadraticVariation {
    /// `(ΔX)²` from the path itself.
    Realized,
    /// `d⟨X⟩ = rate · du`, e.g. `rate = 1` for Brownian motion.
    Rate(f64),
}

/// One row of an Itô reconstruction trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualRow {
    pub t: f64,
    pub residual: f64,
    pub h: f64,
}

/// Running reconstruction error of `F(t, X_t) − F(0, X_0)` by the discrete
/// functional Itô sum with derivatives taken at left nodes.
pub fn ito_residual_trace(
    f: &dyn PathFunctional,
    full_path: &StoppedPath,
    h_v: f64,
    qv: QuadraticVariation,
) -> Result<Vec<ResidualRow>> {
    check_vertical(h_v)?;
    let grid = full_path.grid();
    let m = full_path.stop_index();
    let x = full_path.values();
    let f0 = f.eval(&full_path.stop_at_index(0)?);
    let mut sum = 0.0;
    let mut rows = Vec::with_capacity(m + 1);
    rows.push(ResidualRow {
        t: 0.0,
        residual: 0.0,
        h: h_v,
    });
    let mut stub = full_path.stop_at_index(0)?;
    for j in 0..m {
        let du = grid.step(j);
        let dx = x[j + 1] - x[j];
        let (d, grad, grad2) = match f.analytic_derivatives(&stub) {
            Some(a) => (a.horizontal, a.vertical, a.second_vertical),
            None => {
                let ext = stub.extend_to_index(j + 1)?;
                let mid = f.eval(&stub);
                let up = f.eval(&stub.vertical_bump(h_v));
                let down = f.eval(&stub.vertical_bump(-h_v));
                (
                    (f.eval(&ext) - mid) / du,
                    (up - down) / (2.0 * h_v),
                    (up - 2.0 * mid + down) / (h_v * h_v),
                )
            }
        };
        let dqv = match qv {
            QuadraticVariation::Realized => dx * dx,
            QuadraticVariation::Rate(rate) => rate * du,
        };
        sum += d * du + grad * dx + 0.5 * grad2 * dqv;
        stub.append(&x[j + 1..j + 2])?;
        let fj = f.eval(&stub);
        rows.push(ResidualRow {
            t: grid.node(j + 1),
            residual: fj - f0 - sum,
            h: h_v,
        });
    }
    Ok(rows)
}

/// Absolute reconstruction error at the end of `full_path`.
pub fn ito_residual(
    f: &dyn PathFunctional,
    full_path: &StoppedPath,
    h_v: f64,
    qv: QuadraticVariation,
) -> Result<f64> {
    let rows = ito_residual_trace(f, full_path, h_v, qv)?;
    Ok(rows.last().map_or(0.0, |r| r.residual.abs()))
}

pub fn write_residual_csv<W: Write>(rows: &[ResidualRow], mut w: W) -> Result<()> {
    writeln!(w, "t,residual,h")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.t, r.residual, r.h)?;
    }
    Ok(())
}

/// Standard Brownian paths `W(0) = 0` on a uniform grid, keyed by seed.
pub fn brownian_battery(horizon: f64, steps: usize, n: usize, seed: u64) -> Result<Vec<StoppedPath>> {
    let grid = TimeGrid::uniform(horizon, steps)?;
    let key = StreamKey::new(seed, DOMAIN_STUB);
    par::try_map_indices(n, |p| {
        let mut z = key.gaussian(p as u64, 0);
        let mut values = Vec::with_capacity(steps + 1);
        let mut w = 0.0;
        values.push(w);
        for k in 0..steps {
            w += grid.step(k).sqrt() * z.next_normal();
            values.push(w);
        }
        StoppedPath::new(grid.clone(), values)
    })
}

/// Every `stride`-th node of a complete path on a uniform grid.
pub fn subsample(path: &StoppedPath, stride: usize) -> Result<StoppedPath> {
    let m = path.stop_index();
    if stride == 0 || m % stride != 0 {
        return Err(domain(format!("stride {stride} does not divide {m} steps")));
    }
    let grid = TimeGrid::uniform(path.grid().node(m), m / stride)?;
    StoppedPath::new(grid, path.values().iter().step_by(stride).copied().collect())
}

/// `DF + b·∇F + ½σ²·∇²F − r·F` at `(t, ω_t)`, with `b` and `σ` the absolute
/// (not per-unit) SDE coefficients.
pub fn pde_residual(
    f: &dyn PathFunctional,
    sp: &StoppedPath,
    b: &dyn PathFunctional,
    sigma: &dyn PathFunctional,
    r: &dyn Fn(f64) -> f64,
) -> Result<f64> {
    let d = derivatives(f, sp, &Bumps::default())?;
    let s = sigma.eval(sp);
    Ok(d.horizontal + b.eval(sp) * d.vertical + 0.5 * s * s * d.second_vertical
        - r(sp.stop_time()) * f.eval(sp))
}
