//! The financial model: a path-dependent geometric SDE
//! `dS/S = b̃(t, S_t) dt + σ̃(t, S_t) dW` under P, with drift replaced by the
//! short rate under Q.
//!
//! Paths are simulated with a log-space Euler scheme: coefficients are read
//! at the left node from the history so far, and every Gaussian draw is
//! keyed by `(seed, path, step)` so continuations from the same stub share
//! draws at the same absolute steps.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::par;
use crate::rng::{StreamKey, DOMAIN_ASSET};
use crate::stopped_paths::{PathFunctional, StoppedPath, TimeGrid};

/// Piecewise-constant, right-continuous short rate and its discount factor
/// `v(t) = exp(−∫₀ᵗ r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscountCurve {
    breaks: Vec<f64>,
    rates: Vec<f64>,
    cumulative: Vec<f64>,
}

impl DiscountCurve {
    pub fn constant(rate: f64) -> Result<Self> {
        Self::piecewise(vec![0.0], vec![rate])
    }

    /// `rates[k]` applies on `[breaks[k], breaks[k+1])`; the last rate
    /// extends indefinitely.
    pub fn piecewise(breaks: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        if breaks.is_empty() || breaks.len() != rates.len() {
            return Err(domain("curve needs one rate per break"));
        }
        if breaks[0] != 0.0 {
            return Err(domain("first curve break must be 0"));
        }
        if breaks.windows(2).any(|w| w[1] <= w[0]) {
            return Err(domain("curve breaks must be strictly increasing"));
        }
        if let Some(r) = rates.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
            return Err(domain(format!("short rate must be finite and non-negative, got {r}")));
        }
        let mut cumulative = vec![0.0];
        for k in 1..breaks.len() {
            let prev = cumulative[k - 1];
            cumulative.push(prev + rates[k - 1] * (breaks[k] - breaks[k - 1]));
        }
        Ok(Self {
            breaks,
            rates,
            cumulative,
        })
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn constant_rate(&self) -> Option<f64> {
        let r0 = self.rates[0];
        self.rates.iter().all(|&r| r == r0).then_some(r0)
    }

    fn segment(&self, t: f64) -> usize {
        self.breaks.partition_point(|&b| b <= t).saturating_sub(1)
    }

    pub fn rate(&self, t: f64) -> f64 {
        self.rates[self.segment(t)]
    }

    /// `∫₀ᵗ r(u) du`.
    pub fn integral(&self, t: f64) -> f64 {
        let k = self.segment(t);
        self.cumulative[k] + self.rates[k] * (t.max(0.0) - self.breaks[k])
    }

    pub fn discount(&self, t: f64) -> f64 {
        (-self.integral(t)).exp()
    }

    /// `v(s)/v(t) = exp(−∫_t^s r)`.
    pub fn discount_ratio(&self, t: f64, s: f64) -> Result<f64> {
        if t > s {
            return Err(domain(format!("discount ratio needs t ≤ s, got t={t}, s={s}")));
        }
        Ok((-(self.integral(s) - self.integral(t))).exp())
    }
}

pub fn discount(curve: &DiscountCurve, t: f64) -> f64 {
    curve.discount(t)
}

pub fn discount_ratio(curve: &DiscountCurve, t: f64, s: f64) -> Result<f64> {
    curve.discount_ratio(t, s)
}

/// Running state of a path, enough for the built-in coefficients.
#[derive(Debug, Clone, Copy)]
struct PathState {
    t: f64,
    spot: f64,
    first: f64,
    integral: f64,
}

impl PathState {
    fn of(sp: &StoppedPath) -> Self {
        Self {
            t: sp.stop_time(),
            spot: sp.last(),
            first: sp.values()[0],
            integral: sp.path_integral(),
        }
    }

    fn average(&self) -> f64 {
        if self.t > 0.0 {
            self.integral / self.t
        } else {
            self.first
        }
    }
}

/// Per-unit drift or volatility functional (`b̃` or `σ̃`).
#[derive(Clone)]
pub enum Coefficient {
    Constant(f64),
    /// `scale · (1/t)∫₀ᵗω`, with `ω(0)` at `t = 0`.
    RunningAverage { scale: f64 },
    /// `base · (1 + slope · (1/t)∫₀ᵗω)`.
    AffineRunningAverage { base: f64, slope: f64 },
    /// `scale · ω(t)^power`. Violates linear growth for `power > 0`; used by
    /// the moment diagnostic.
    SpotPower { scale: f64, power: f64 },
    Custom(Arc<dyn PathFunctional>),
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Constant(c) => write!(f, "Constant({c})"),
            Coefficient::RunningAverage { scale } => write!(f, "RunningAverage({scale})"),
            Coefficient::AffineRunningAverage { base, slope } => {
                write!(f, "AffineRunningAverage({base}, {slope})")
            }
            Coefficient::SpotPower { scale, power } => write!(f, "SpotPower({scale}, {power})"),
            Coefficient::Custom(c) => write!(f, "Custom({})", c.name()),
        }
    }
}

impl Coefficient {
    pub fn eval(&self, sp: &StoppedPath) -> f64 {
        match self {
            Coefficient::Custom(f) => f.eval(sp),
            _ => self.eval_state(&PathState::of(sp), sp),
        }
    }

    fn eval_state(&self, st: &PathState, path: &StoppedPath) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::RunningAverage { scale } => scale * st.average(),
            Coefficient::AffineRunningAverage { base, slope } => base * (1.0 + slope * st.average()),
            Coefficient::SpotPower { scale, power } => scale * st.spot.powf(*power),
            Coefficient::Custom(f) => f.eval(path),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Measure {
    P,
    Q,
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Measure::P => "P",
            Measure::Q => "Q",
        })
    }
}

#[derive(Debug, Clone)]
pub struct MarketModel {
    pub drift: Coefficient,
    pub volatility: Coefficient,
    pub s0: f64,
    pub curve: DiscountCurve,
}

impl MarketModel {
    pub fn new(drift: Coefficient, volatility: Coefficient, s0: f64, curve: DiscountCurve) -> Result<Self> {
        if !(s0 > 0.0 && s0.is_finite()) {
            return Err(domain(format!("initial asset value must be positive, got {s0}")));
        }
        Ok(Self {
            drift,
            volatility,
            s0,
            curve,
        })
    }

    pub fn black_scholes(s0: f64, drift: f64, volatility: f64, curve: DiscountCurve) -> Result<Self> {
        Self::new(Coefficient::Constant(drift), Coefficient::Constant(volatility), s0, curve)
    }

    /// Risk-neutral Black–Scholes: drift set to the (constant) short rate.
    pub fn risk_neutral_black_scholes(s0: f64, rate: f64, volatility: f64) -> Result<Self> {
        Self::black_scholes(s0, rate, volatility, DiscountCurve::constant(rate)?)
    }

    /// `b(t, ω) = ω(t)·b̃(t, ω_t)`.
    pub fn absolute_drift(&self, sp: &StoppedPath) -> f64 {
        sp.last() * self.drift.eval(sp)
    }

    /// `σ(t, ω) = ω(t)·σ̃(t, ω_t)`.
    pub fn absolute_volatility(&self, sp: &StoppedPath) -> f64 {
        sp.last() * self.volatility.eval(sp)
    }

    /// One continuation of `xi` to node `to`. `sign = −1` gives the
    /// antithetic partner of the same stream.
    pub fn continuation(
        &self,
        xi: &StoppedPath,
        to: usize,
        measure: Measure,
        key: StreamKey,
        stream: u64,
        sign: f64,
    ) -> Result<StoppedPath> {
        let grid = xi.grid();
        let j0 = xi.stop_index();
        if to >= grid.len() || to < j0 {
            return Err(domain(format!("cannot continue from node {j0} to node {to}")));
        }
        let mut path = xi.clone();
        let mut st = PathState::of(xi);
        let mut gauss = key.gaussian(stream, j0);
        for k in j0..to {
            let dt = grid.step(k);
            let t = grid.node(k);
            let fail = |reason: String| Error::Simulation {
                path: stream as usize,
                node: k,
                reason,
            };
            let sigma = self.volatility.eval_state(&st, &path);
            let drift_dt = match measure {
                Measure::Q => self.curve.integral(t + dt) - self.curve.integral(t),
                Measure::P => self.drift.eval_state(&st, &path) * dt,
            };
            if !sigma.is_finite() || !drift_dt.is_finite() {
                return Err(fail(format!("non-finite coefficient (σ̃={sigma}, b̃·Δt={drift_dt})")));
            }
            let z = sign * gauss.next_normal();
            let next = st.spot * (drift_dt - 0.5 * sigma * sigma * dt + sigma * dt.sqrt() * z).exp();
            if !(next.is_finite() && next > 0.0) {
                return Err(Error::Simulation {
                    path: stream as usize,
                    node: k + 1,
                    reason: format!("asset left (0, ∞): {next}"),
                });
            }
            st.integral += 0.5 * dt * (st.spot + next);
            st.spot = next;
            st.t = grid.node(k + 1);
            path.append(&[next])?;
        }
        Ok(path)
    }
}

/// Simulated paths stopped at `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioBatch {
    pub grid: TimeGrid,
    pub paths: Vec<StoppedPath>,
    pub seed: u64,
    pub measure: Measure,
}

const CACHE_MAGIC: &[u8; 4] = b"PRSB";
const CACHE_VERSION: u16 = 1;

impl ScenarioBatch {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Values of every path at node `k`.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.paths.iter().map(|p| p.values()[k]).collect()
    }

    /// Binary cache: header, grid nodes, then one path record per path.
    pub fn write_cache<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_u16::<LittleEndian>(CACHE_VERSION)?;
        w.write_u8(match self.measure {
            Measure::P => 0,
            Measure::Q => 1,
        })?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_u32::<LittleEndian>(self.grid.len() as u32)?;
        for u in self.grid.nodes() {
            w.write_f64::<LittleEndian>(*u)?;
        }
        w.write_u32::<LittleEndian>(self.paths.len() as u32)?;
        for p in &self.paths {
            p.write_record(&mut w)?;
        }
        Ok(())
    }

    pub fn read_cache<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Format("not a scenario cache".into()));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != CACHE_VERSION {
            return Err(Error::Format(format!("unsupported cache version {version}")));
        }
        let measure = match r.read_u8()? {
            0 => Measure::P,
            1 => Measure::Q,
            m => return Err(Error::Format(format!("unknown measure tag {m}"))),
        };
        let seed = r.read_u64::<LittleEndian>()?;
        let nodes = r.read_u32::<LittleEndian>()? as usize;
        let mut grid_nodes = Vec::with_capacity(nodes);
        for _ in 0..nodes {
            grid_nodes.push(r.read_f64::<LittleEndian>()?);
        }
        let grid = TimeGrid::from_nodes(grid_nodes)?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        let paths = (0..count)
            .map(|_| StoppedPath::read_record(&mut r, &grid))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid,
            paths,
            seed,
            measure,
        })
    }

    /// Long-format CSV `path,time,value`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "path,time,value")?;
        for (i, p) in self.paths.iter().enumerate() {
            for (u, v) in self.grid.nodes().iter().zip(p.values()) {
                writeln!(w, "{i},{u},{v}")?;
            }
        }
        Ok(())
    }
}

/// `n` paths from `S(0) = s0` to `T`.
pub fn simulate(model: &MarketModel, grid: &TimeGrid, n: usize, measure: Measure, seed: u64) -> Result<ScenarioBatch> {
    let start = StoppedPath::constant(grid.clone(), model.s0, 0)?;
    resimulate_from(model, &start, grid, n, measure, seed)
}

/// `n` continuations of `xi` to `T`, each agreeing with `xi` on `[0, t₀]`.
pub fn resimulate_from(
    model: &MarketModel,
    xi: &StoppedPath,
    grid: &TimeGrid,
    n: usize,
    measure: Measure,
    seed: u64,
) -> Result<ScenarioBatch> {
    resimulate_with(model, xi, grid, n, measure, seed, false)
}

/// As [`resimulate_from`]; with `antithetic`, paths `2p` and `2p + 1` use
/// stream `p` with opposite signs.
pub fn resimulate_with(
    model: &MarketModel,
    xi: &StoppedPath,
    grid: &TimeGrid,
    n: usize,
    measure: Measure,
    seed: u64,
    antithetic: bool,
) -> Result<ScenarioBatch> {
    if n == 0 {
        return Err(domain("need at least one path"));
    }
    if xi.grid() != grid {
        return Err(domain("initial path lives on a different grid"));
    }
    if xi.is_complete() {
        return Err(domain(format!(
            "initial path is stopped at the horizon {}",
            grid.horizon()
        )));
    }
    let key = StreamKey::new(seed, DOMAIN_ASSET);
    let to = grid.steps();
    let paths = par::try_map_indices(n, |i| {
        let (stream, sign) = if antithetic {
            ((i / 2) as u64, if i % 2 == 0 { 1.0 } else { -1.0 })
        } else {
            (i as u64, 1.0)
        };
        model.continuation(xi, to, measure, key, stream, sign)
    })?;
    Ok(ScenarioBatch {
        grid: grid.clone(),
        paths,
        seed,
        measure,
    })
}

/// `θ(t) = (b̃(t, ω_t) − r(t))/σ̃(t, ω_t)`.
pub fn market_price_of_risk(model: &MarketModel, sp: &StoppedPath) -> Result<f64> {
    let sigma = model.volatility.eval(sp);
    if !(sigma > f64::EPSILON) {
        return Err(Error::Singularity(sigma));
    }
    Ok((model.drift.eval(sp) - model.curve.rate(sp.stop_time())) / sigma)
}

/// Second-moment growth of `sup_{s≤t} S(s)²` along a batch.
#[derive(Debug, Clone, Serialize)]
pub struct MomentReport {
    pub times: Vec<f64>,
    /// `E[sup_{s≤t} S(s)²]` estimate per node from `t₀`.
    pub second_moment: Vec<f64>,
    /// Smallest `C` with `m(t) ≤ C(1 + sup ξ²)e^{C(t−t₀)}` on the first half
    /// of the window.
    pub fitted_c: f64,
    /// Whether the fitted bound holds on the whole window.
    pub dominated: bool,
    /// Log-growth rate of `m` over the first and last quarter.
    pub early_growth: f64,
    pub late_growth: f64,
    pub super_exponential: bool,
}

pub fn moment_diagnostic(batch: &ScenarioBatch, xi: &StoppedPath) -> Result<MomentReport> {
    if batch.is_empty() {
        return Err(domain("empty batch"));
    }
    let j0 = xi.stop_index();
    let m = batch.grid.steps();
    if j0 >= m {
        return Err(domain("initial path must stop before the horizon"));
    }
    let n = batch.len() as f64;
    let mut running: Vec<f64> = batch
        .paths
        .iter()
        .map(|p| p.values()[..=j0].iter().fold(0.0, |a: f64, v| a.max(v * v)))
        .collect();
    let mut second_moment = Vec::with_capacity(m - j0 + 1);
    for k in j0..=m {
        for (r, p) in running.iter_mut().zip(&batch.paths) {
            *r = r.max(p.values()[k].powi(2));
        }
        second_moment.push(running.iter().sum::<f64>() / n);
    }
    let times: Vec<f64> = batch.grid.nodes()[j0..].to_vec();
    let t0 = times[0];
    let base = 1.0 + xi.sup_abs().powi(2);
    let needed = |k: usize| -> f64 {
        let (tau, target) = (times[k] - t0, second_moment[k]);
        let g = |c: f64| c * base * (c * tau).exp();
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        while g(hi) < target {
            hi *= 2.0;
            if hi > 1e6 {
                return f64::INFINITY;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };
    let len = times.len();
    let fitted_c = (0..=len / 2).map(needed).fold(0.0, f64::max);
    let dominated = (0..len).all(|k| {
        let tau = times[k] - t0;
        second_moment[k] <= fitted_c * base * (fitted_c * tau).exp() * (1.0 + 1e-12)
    });
    let rate = |a: usize, b: usize| -> f64 {
        if b <= a || times[b] <= times[a] {
            return 0.0;
        }
        (second_moment[b].ln() - second_moment[a].ln()) / (times[b] - times[a])
    };
    let q = (len - 1) / 4;
    let early_growth = rate(0, q);
    let late_growth = rate(len - 1 - q, len - 1);
    let super_exponential = late_growth > 0.05 && late_growth > 2.0 * early_growth.max(0.0);
    Ok(MomentReport {
        times,
        second_moment,
        fitted_c,
        dominated,
        early_growth,
        late_growth,
        super_exponential,
    })
}

/// Largest observed `(|b(ω)−b(ω')| + |σ(ω)−σ(ω')|) / sup|ω−ω'|` over pairs
/// of paths stopped at the same node.
pub fn path_lipschitz_estimate(model: &MarketModel, paths: &[StoppedPath]) -> Result<f64> {
    let mut worst = 0.0f64;
    for (i, a) in paths.iter().enumerate() {
        for b in &paths[i + 1..] {
            if a.stop_index() != b.stop_index() {
                return Err(domain("Lipschitz battery paths must share a stop index"));
            }
            let sup = a
                .values()
                .iter()
                .zip(b.values())
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            if sup == 0.0 {
                continue;
            }
            let db = (model.absolute_drift(a) - model.absolute_drift(b)).abs();
            let ds = (model.absolute_volatility(a) - model.absolute_volatility(b)).abs();
            worst = worst.max((db + ds) / sup);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stopped_paths::functional;

    fn bs(rate: f64, sigma: f64) -> MarketModel {
        MarketModel::risk_neutral_black_scholes(1.0, rate, sigma).unwrap()
    }

    fn mean_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    #[test]
    fn discount_examples() {
        let c = DiscountCurve::constant(0.05).unwrap();
        assert_eq!(c.discount(0.0), 1.0);
        assert!((c.discount(2.0) - 0.904_837_418_035_959_6).abs() < 1e-15);
        let p = DiscountCurve::piecewise(vec![0.0, 1.0], vec![0.02, 0.04]).unwrap();
        assert!((p.discount(2.0) - (-0.06f64).exp()).abs() < 1e-15);
        assert_eq!(p.rate(1.0), 0.04);
        assert_eq!(p.rate(0.999), 0.02);
        assert!((p.discount_ratio(0.5, 1.5).unwrap() - (-0.03f64).exp()).abs() < 1e-15);
        assert!(p.discount_ratio(1.5, 0.5).is_err());
        assert!(DiscountCurve::constant(-0.01).is_err());
        assert!(DiscountCurve::piecewise(vec![0.5], vec![0.01]).is_err());
        assert_eq!(p.constant_rate(), None);
        assert_eq!(c.constant_rate(), Some(0.05));
    }

    #[test]
    fn discount_factor_is_non_increasing() {
        let p = DiscountCurve::piecewise(vec![0.0, 0.3, 2.0], vec![0.0, 0.07, 0.01]).unwrap();
        let mut prev = 1.0;
        for k in 0..=300 {
            let v = p.discount(k as f64 * 0.01);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn degenerate_dynamics_are_constant() {
        let m = MarketModel::black_scholes(2.0, 0.0, 0.0, DiscountCurve::constant(0.0).unwrap()).unwrap();
        let g = TimeGrid::uniform(1.0, 32).unwrap();
        let b = simulate(&m, &g, 5, Measure::P, 1).unwrap();
        for p in &b.paths {
            assert!(p.values().iter().all(|&v| v == 2.0));
        }
    }

    #[test]
    fn q_mean_matches_forward() {
        let g = TimeGrid::uniform(1.0, 64).unwrap();
        let b = simulate(&bs(0.03, 0.2), &g, 40_000, Measure::Q, 17).unwrap();
        let (m, se) = mean_se(&b.column(64));
        assert!((m - 0.03f64.exp()).abs() < 4.0 * se, "{m} ± {se}");
    }

    #[test]
    fn q_ignores_path_dependent_drift() {
        let g = TimeGrid::uniform(1.0, 32).unwrap();
        let curve = DiscountCurve::constant(0.02).unwrap();
        let plain = MarketModel::black_scholes(1.0, 0.5, 0.2, curve.clone()).unwrap();
        let averaged = MarketModel::new(
            Coefficient::RunningAverage { scale: 0.7 },
            Coefficient::Constant(0.2),
            1.0,
            curve,
        )
        .unwrap();
        let a = simulate(&plain, &g, 10, Measure::Q, 3).unwrap();
        let b = simulate(&averaged, &g, 10, Measure::Q, 3).unwrap();
        assert_eq!(a.paths, b.paths);
        let c = simulate(&averaged, &g, 10, Measure::P, 3).unwrap();
        assert_ne!(a.paths, c.paths);
    }

    #[test]
    fn resimulation_from_zero_equals_simulation() {
        let g = TimeGrid::uniform(1.0, 16).unwrap();
        let m = bs(0.03, 0.25);
        let xi = StoppedPath::constant(g.clone(), 1.0, 0).unwrap();
        assert_eq!(
            simulate(&m, &g, 8, Measure::Q, 9).unwrap(),
            resimulate_from(&m, &xi, &g, 8, Measure::Q, 9).unwrap()
        );
    }

    #[test]
    fn resimulation_keeps_history_and_errors_at_horizon() {
        let g = TimeGrid::uniform(1.0, 16).unwrap();
        let xi = StoppedPath::from_fn(g.clone(), 6, |s| 1.0 + s).unwrap();
        let b = resimulate_from(&bs(0.03, 0.3), &xi, &g, 4, Measure::Q, 2).unwrap();
        for p in &b.paths {
            assert_eq!(&p.values()[..7], xi.values());
            assert!(p.is_complete());
        }
        let full = StoppedPath::constant(g.clone(), 1.0, 16).unwrap();
        assert!(resimulate_from(&bs(0.03, 0.3), &full, &g, 4, Measure::Q, 2).is_err());
    }

    #[test]
    fn zero_volatility_continuation_is_the_deterministic_flow() {
        let g = TimeGrid::uniform(2.0, 20).unwrap();
        let curve = DiscountCurve::piecewise(vec![0.0, 1.0], vec![0.02, 0.05]).unwrap();
        let m = MarketModel::black_scholes(1.0, 0.0, 0.0, curve.clone()).unwrap();
        let xi = StoppedPath::from_fn(g.clone(), 5, |s| 1.0 + s * s).unwrap();
        let b = resimulate_from(&m, &xi, &g, 2, Measure::Q, 0).unwrap();
        let x0 = xi.last();
        for k in 5..=20 {
            let u = g.node(k);
            let exact = x0 * (curve.integral(u) - curve.integral(g.node(5))).exp();
            assert!((b.paths[0].values()[k] - exact).abs() < 1e-13);
        }
    }

    #[test]
    fn conditional_mean_from_stub() {
        let g = TimeGrid::uniform(1.0, 64).unwrap();
        let xi = StoppedPath::from_fn(g.clone(), 32, |s| 1.0 + 0.4 * s).unwrap();
        let b = resimulate_from(&bs(0.03, 0.2), &xi, &g, 40_000, Measure::Q, 5).unwrap();
        let (m, se) = mean_se(&b.column(64));
        let expected = xi.last() * (0.03f64 * 0.5).exp();
        assert!((m - expected).abs() < 4.0 * se);
    }

    #[test]
    fn reproducible_and_positive() {
        let g = TimeGrid::uniform(1.0, 50).unwrap();
        let m = MarketModel::new(
            Coefficient::RunningAverage { scale: 0.1 },
            Coefficient::AffineRunningAverage { base: 0.6, slope: 0.5 },
            1.0,
            DiscountCurve::constant(0.01).unwrap(),
        )
        .unwrap();
        let a = simulate(&m, &g, 200, Measure::P, 42).unwrap();
        let b = simulate(&m, &g, 200, Measure::P, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.paths.iter().all(|p| p.values().iter().all(|&v| v > 0.0)));
    }

    #[test]
    fn custom_coefficients_see_the_concatenated_history() {
        let g = TimeGrid::uniform(1.0, 40).unwrap();
        let curve = DiscountCurve::constant(0.0).unwrap();
        let builtin = MarketModel::new(
            Coefficient::RunningAverage { scale: 0.3 },
            Coefficient::Constant(0.2),
            1.0,
            curve.clone(),
        )
        .unwrap();
        let avg = functional("avg", |p| {
            if p.stop_time() > 0.0 {
                0.3 * p.path_integral() / p.stop_time()
            } else {
                0.3 * p.values()[0]
            }
        });
        let custom = MarketModel::new(Coefficient::Custom(avg), Coefficient::Constant(0.2), 1.0, curve).unwrap();
        let xi = StoppedPath::from_fn(g.clone(), 10, |s| 1.0 + 2.0 * s).unwrap();
        let a = resimulate_from(&builtin, &xi, &g, 3, Measure::P, 8).unwrap();
        let b = resimulate_from(&custom, &xi, &g, 3, Measure::P, 8).unwrap();
        for (p, q) in a.paths.iter().zip(&b.paths) {
            for (x, y) in p.values().iter().zip(q.values()) {
                assert!((x - y).abs() < 1e-12 * x.abs());
            }
        }
    }

    #[test]
    fn non_finite_coefficients_are_reported() {
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        let bad = functional("bad", |p| if p.stop_index() >= 4 { f64::NAN } else { 0.2 });
        let m = MarketModel::new(
            Coefficient::Constant(0.0),
            Coefficient::Custom(bad),
            1.0,
            DiscountCurve::constant(0.0).unwrap(),
        )
        .unwrap();
        match simulate(&m, &g, 3, Measure::Q, 1) {
            Err(Error::Simulation { node, .. }) => assert_eq!(node, 4),
            other => panic!("expected simulation error, got {other:?}"),
        }
    }

    #[test]
    fn discounted_martingale_at_every_node() {
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        let m = bs(0.05, 0.3);
        let b = simulate(&m, &g, 100_000, Measure::Q, 77).unwrap();
        for k in 0..=10 {
            let v = m.curve.discount(g.node(k));
            let disc: Vec<f64> = b.column(k).iter().map(|s| v * s).collect();
            let (mean, se) = mean_se(&disc);
            assert!((mean - 1.0).abs() <= 4.0 * se.max(1e-15), "node {k}");
        }
    }

    #[test]
    fn tower_property_over_outer_stubs() {
        let g = TimeGrid::uniform(1.0, 20).unwrap();
        let m = bs(0.03, 0.25);
        let outer = simulate(&m, &g, 200, Measure::Q, 4).unwrap();
        let mut inner_means = Vec::new();
        for (i, p) in outer.paths.iter().enumerate() {
            let stub = p.stop_at_index(10).unwrap();
            let inner = resimulate_from(&m, &stub, &g, 200, Measure::Q, 1000 + i as u64).unwrap();
            inner_means.push(inner.column(20).iter().sum::<f64>() / 200.0);
        }
        let (mean, se) = mean_se(&inner_means);
        assert!((mean - 0.03f64.exp()).abs() < 4.0 * se);
    }

    #[test]
    fn market_price_of_risk_examples() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let sp = StoppedPath::constant(g, 1.0, 2).unwrap();
        let curve = DiscountCurve::constant(0.03).unwrap();
        let m = MarketModel::black_scholes(1.0, 0.03, 0.2, curve.clone()).unwrap();
        assert_eq!(market_price_of_risk(&m, &sp).unwrap(), 0.0);
        let m = MarketModel::black_scholes(1.0, 0.08, 0.2, curve.clone()).unwrap();
        assert!((market_price_of_risk(&m, &sp).unwrap() - 0.25).abs() < 1e-15);
        let m = MarketModel::black_scholes(1.0, 0.08, 0.0, curve).unwrap();
        assert!(matches!(market_price_of_risk(&m, &sp), Err(Error::Singularity(_))));
    }

    #[test]
    fn moment_diagnostic_cases() {
        let g = TimeGrid::uniform(1.5, 60).unwrap();
        let xi = StoppedPath::constant(g.clone(), 0.5, 0).unwrap();

        let flat = MarketModel::black_scholes(0.5, 0.0, 0.0, DiscountCurve::constant(0.0).unwrap()).unwrap();
        let b = resimulate_from(&flat, &xi, &g, 10, Measure::P, 1).unwrap();
        let rep = moment_diagnostic(&b, &xi).unwrap();
        assert!((rep.fitted_c - 0.25 / 1.25).abs() < 1e-9);
        assert!(rep.dominated && !rep.super_exponential);
        assert_eq!(rep.late_growth, 0.0);

        let bs = MarketModel::black_scholes(0.5, 0.03, 0.2, DiscountCurve::constant(0.03).unwrap()).unwrap();
        let b = resimulate_from(&bs, &xi, &g, 4000, Measure::P, 2).unwrap();
        let rep = moment_diagnostic(&b, &xi).unwrap();
        assert!(rep.second_moment.iter().all(|m| m.is_finite()));
        assert!(rep.second_moment.windows(2).all(|w| w[1] >= w[0]));
        assert!(rep.dominated && !rep.super_exponential);

        let blow = MarketModel::new(
            Coefficient::SpotPower { scale: 1.0, power: 2.0 },
            Coefficient::Constant(0.02),
            0.5,
            DiscountCurve::constant(0.0).unwrap(),
        )
        .unwrap();
        let b = resimulate_from(&blow, &xi, &g, 500, Measure::P, 3).unwrap();
        let rep = moment_diagnostic(&b, &xi).unwrap();
        assert!(rep.super_exponential, "{rep:?}");
        assert!(!rep.dominated);
    }

    #[test]
    fn builtin_coefficients_are_path_lipschitz() {
        let g = TimeGrid::uniform(1.0, 20).unwrap();
        let curve = DiscountCurve::constant(0.02).unwrap();
        let battery: Vec<StoppedPath> = simulate(&bs(0.02, 0.3), &g, 40, Measure::Q, 12)
            .unwrap()
            .paths
            .iter()
            .map(|p| p.stop_at_index(15).unwrap())
            .collect();
        let models = [
            MarketModel::black_scholes(1.0, 0.05, 0.2, curve.clone()).unwrap(),
            MarketModel::new(Coefficient::RunningAverage { scale: 0.1 }, Coefficient::Constant(0.2), 1.0, curve.clone()).unwrap(),
            MarketModel::new(
                Coefficient::Constant(0.05),
                Coefficient::AffineRunningAverage { base: 0.2, slope: 0.3 },
                1.0,
                curve,
            )
            .unwrap(),
        ];
        for m in &models {
            let k = path_lipschitz_estimate(m, &battery).unwrap();
            assert!(k.is_finite() && k < 5.0, "{k}");
        }
    }

    #[test]
    fn cache_round_trip() {
        let g = TimeGrid::with_dates(1.0, 8, &[0.3]).unwrap();
        let b = simulate(&bs(0.03, 0.2), &g, 5, Measure::Q, 99).unwrap();
        let mut buf = Vec::new();
        b.write_cache(&mut buf).unwrap();
        assert_eq!(ScenarioBatch::read_cache(&buf[..]).unwrap(), b);
        buf[0] = b'X';
        assert!(ScenarioBatch::read_cache(&buf[..]).is_err());
    }
}
