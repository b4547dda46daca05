//! State-wise reserves of an equity-linked policy.
//!
//! `V⃗_i(t, ω_t)` is assembled from transition probabilities and the
//! discounted conditional expectations
//! `U_s^φ(t, ω_t) = v(s)/v(t)·E^Q[φ(s, S_s) | S_t = ω_t]`:
//!
//! ```text
//! V⃗_i(t) = Σ_j Σ_{t_k > t} p_ij(t,t_k) U_{t_k}^{f_j}
//!        + Σ_j ∫_t^T p_ij(t,s) U_s^{g_j} ds
//!        + Σ_{j≠k} ∫_t^T p_ij(t,s) μ_jk(s) U_s^{h_jk} ds
//! ```
//!
//! All `U` terms of one stub are estimated from one shared batch of inner
//! continuations: each inner path contributes one aggregate sample per
//! state, so the reported standard error accounts for the correlation
//! between terms. A direct estimator averages simulated prospective values
//! instead and serves as the independent cross-check.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use crate::asian_oracle::ClosedForm;
use crate::cashflow::{cash_increments, split_values, CashflowSpec, JointScenario};
use crate::error::{domain, Error, Result};
use crate::functional_calculus::{derivatives, Bumps, Derivatives};
use crate::market::{MarketModel, Measure};
use crate::par;
use crate::policy_chain::{simulate_trajectory, MarkovModel, TransitionCache};
use crate::rng::{StreamKey, DOMAIN_ASSET, DOMAIN_CHAIN, DOMAIN_INNER};
use crate::stats::{Summary, HEAVY_TAIL_KURTOSIS};
use crate::stopped_paths::{PathFunctional, StoppedPath, TimeGrid};

pub const DEFAULT_N_INNER: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub n_inner: usize,
    pub antithetic: bool,
    pub seed: u64,
    /// Use closed-form `U` for payoffs that have one.
    pub closed_forms: bool,
    pub bumps: Bumps,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            n_inner: DEFAULT_N_INNER,
            antithetic: true,
            seed: 0,
            closed_forms: false,
            bumps: Bumps::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Res2Nested,
    Res1Direct,
    Oracle,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Res2Nested => "res2-nested",
            Method::Res1Direct => "res1-direct",
            Method::Oracle => "oracle",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReserveRow {
    pub state: usize,
    pub time: f64,
    pub value: f64,
    pub std_error: f64,
    pub n_outer: usize,
    pub n_inner: usize,
    pub method: Method,
    pub excess_kurtosis: f64,
    pub heavy_tail: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReserveReport {
    pub rows: Vec<ReserveRow>,
}

impl ReserveReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "state,time,value,std_error,n_outer,n_inner,method,heavy_tail")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.state, r.time, r.value, r.std_error, r.n_outer, r.n_inner, r.method, r.heavy_tail
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Mean and standard error; with `antithetic`, consecutive samples are
/// paired and the error is taken over pair means.
pub fn summarize(samples: &[f64], antithetic: bool) -> Summary {
    if antithetic {
        let pairs: Vec<f64> = samples.chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect();
        let mut s = Summary::of(&pairs);
        s.excess_kurtosis = Summary::of(samples).excess_kurtosis;
        s.n = samples.len();
        s
    } else {
        Summary::of(samples)
    }
}

fn check_inner(n: usize, antithetic: bool) -> Result<()> {
    if n < 2 {
        return Err(domain("need at least two inner samples"));
    }
    if antithetic && n % 2 == 1 {
        return Err(domain(format!("antithetic sampling needs an even sample count, got {n}")));
    }
    Ok(())
}

fn stream_of(m: usize, antithetic: bool) -> (u64, f64) {
    if antithetic {
        ((m / 2) as u64, if m % 2 == 0 { 1.0 } else { -1.0 })
    } else {
        (m as u64, 1.0)
    }
}

/// Nested estimator of `U_s^φ` at stub paths.
#[derive(Clone)]
pub struct UEstimator {
    pub payoff: Arc<dyn PathFunctional>,
    pub maturity: f64,
    pub n_inner: usize,
    pub market: MarketModel,
    pub antithetic: bool,
}

impl UEstimator {
    pub fn new(payoff: Arc<dyn PathFunctional>, maturity: f64, n_inner: usize, market: MarketModel) -> Result<Self> {
        check_inner(n_inner, true)?;
        Ok(Self {
            payoff,
            maturity,
            n_inner,
            market,
            antithetic: true,
        })
    }

    /// `(U, standard error)` at `sp` from `n_inner` continuations.
    pub fn estimate(&self, sp: &StoppedPath, seed: u64) -> Result<(f64, f64)> {
        check_inner(self.n_inner, self.antithetic)?;
        let grid = sp.grid();
        let s_index = grid
            .index_of(self.maturity)
            .ok_or_else(|| domain(format!("maturity {} is not a grid node", self.maturity)))?;
        let j = sp.stop_index();
        if j > s_index {
            return Err(domain(format!("stub at t={} is past the maturity {}", sp.stop_time(), self.maturity)));
        }
        if j == s_index {
            let v = self.payoff.eval(sp);
            if !v.is_finite() {
                return Err(Error::Estimation {
                    seed,
                    index: 0,
                    reason: format!("payoff returned {v}"),
                });
            }
            return Ok((v, 0.0));
        }
        let ratio = self.market.curve.discount_ratio(sp.stop_time(), self.maturity)?;
        let key = StreamKey::new(seed, DOMAIN_INNER);
        let samples = par::try_map_indices(self.n_inner, |m| {
            let (stream, sign) = stream_of(m, self.antithetic);
            let path = self.market.continuation(sp, s_index, Measure::Q, key, stream, sign)?;
            let v = self.payoff.eval(&path);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Estimation {
                    seed,
                    index: m,
                    reason: format!("payoff returned {v}"),
                })
            }
        })?;
        let s = summarize(&samples, self.antithetic);
        if s.excess_kurtosis > HEAVY_TAIL_KURTOSIS {
            log::warn!("heavy-tailed inner batch for {} (excess kurtosis {:.1})", self.payoff.name(), s.excess_kurtosis);
        }
        Ok((ratio * s.mean, ratio * s.std_error))
    }
}

pub fn estimate_u(est: &UEstimator, sp: &StoppedPath, seed: u64) -> Result<(f64, f64)> {
    est.estimate(sp, seed)
}

/// `L_ω F = ω(t) r(t) ∇F + ½ ω(t)² σ̃² ∇²F` from given derivatives.
pub fn apply_l(d: &Derivatives, sp: &StoppedPath, model: &MarketModel) -> f64 {
    let w = sp.last();
    let sigma = model.volatility.eval(sp);
    w * model.curve.rate(sp.stop_time()) * d.vertical + 0.5 * w * w * sigma * sigma * d.second_vertical
}

pub fn operator_l(f: &dyn PathFunctional, sp: &StoppedPath, model: &MarketModel, bumps: &Bumps) -> Result<f64> {
    Ok(apply_l(&derivatives(f, sp, bumps)?, sp, model))
}

fn slot_value(slot: &Option<Arc<dyn PathFunctional>>, sp: &StoppedPath) -> f64 {
    slot.as_ref().map_or(0.0, |f| f.eval(sp))
}

/// Right-hand side of the Thiele equation without `DV_i`.
fn thiele_rhs(spec: &CashflowSpec, chain: &MarkovModel, i: usize, sp: &StoppedPath, v: &[f64], rate: f64, l: f64) -> f64 {
    let t = sp.stop_time();
    let mut transfer = 0.0;
    for k in (0..chain.states()).filter(|&k| k != i) {
        let mu = chain.rate(i, k, t);
        if mu != 0.0 {
            transfer += mu * (slot_value(spec.transition(i, k), sp) + v[k] - v[i]);
        }
    }
    rate * v[i] - slot_value(spec.sojourn(i), sp) - transfer - l
}

/// `DV_i − [rV_i − g_i − Σ_{j≠i} μ_ij(h_ij + V_j − V_i) − L V_i]` for
/// arbitrary per-state reserve functionals, with derivatives from
/// [`derivatives`] (analytic when the functional provides them).
pub fn thiele_residual(
    v: &[Arc<dyn PathFunctional>],
    spec: &CashflowSpec,
    chain: &MarkovModel,
    i: usize,
    sp: &StoppedPath,
    model: &MarketModel,
    bumps: &Bumps,
) -> Result<f64> {
    if v.len() != chain.states() || spec.states() != chain.states() || i >= v.len() {
        return Err(domain("reserve functionals, spec and chain disagree on the state count"));
    }
    if sp.is_complete() {
        return Err(domain("the Thiele equation is checked strictly before the horizon"));
    }
    let d = derivatives(v[i].as_ref(), sp, bumps)?;
    let values: Vec<f64> = v.iter().map(|f| f.eval(sp)).collect();
    let rhs = thiele_rhs(spec, chain, i, sp, &values, model.curve.rate(sp.stop_time()), apply_l(&d, sp, model));
    Ok(d.horizontal - rhs)
}

#[derive(Debug, Clone, Serialize)]
pub struct FinalConditionReport {
    pub max_abs: f64,
    pub tolerance: f64,
    /// `(state, path index, value)` above tolerance.
    pub violations: Vec<(usize, usize, f64)>,
}

impl FinalConditionReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Evaluates every `V_i` at `T` on a battery of complete paths.
pub fn verify_final_condition(v: &[Arc<dyn PathFunctional>], battery: &[StoppedPath], tolerance: f64) -> Result<FinalConditionReport> {
    let mut max_abs = 0.0f64;
    let mut violations = Vec::new();
    for (p, path) in battery.iter().enumerate() {
        if !path.is_complete() {
            return Err(domain(format!("battery path {p} stops before the horizon")));
        }
        for (i, f) in v.iter().enumerate() {
            let x = f.eval(path);
            max_abs = max_abs.max(x.abs());
            if !(x.abs() <= tolerance) {
                violations.push((i, p, x));
            }
        }
    }
    Ok(FinalConditionReport {
        max_abs,
        tolerance,
        violations,
    })
}

/// Which branch produced a Thiele check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    Analytic,
    MonteCarlo,
}

#[derive(Debug, Clone, Serialize)]
pub struct ThieleCheck {
    pub state: usize,
    pub time: f64,
    pub residual: f64,
    /// Standard error of the residual (zero on the analytic branch).
    pub std_error: f64,
    /// `|D_Δ − D_2Δ|`, the size of the finite-difference truncation.
    pub truncation: f64,
    pub n_inner: usize,
    pub branch: Branch,
}

/// One payment functional with its quadrature/probability coefficients per
/// state and maturity node.
struct Group {
    functional: Arc<dyn PathFunctional>,
    /// `coef[i][s − j]`, without discounting.
    coef: Vec<Vec<f64>>,
}

struct Plan {
    j: usize,
    /// `v(u_s)/v(t)` for `s ≥ j`.
    disc: Vec<f64>,
    mc: Vec<Group>,
    fixed: Vec<f64>,
}

/// Reserve engine for one market, chain, contract and grid.
pub struct ReserveEngine {
    model: MarketModel,
    spec: CashflowSpec,
    cache: TransitionCache,
    config: EngineConfig,
    dates: Vec<usize>,
}

impl ReserveEngine {
    pub fn new(model: MarketModel, chain: MarkovModel, spec: CashflowSpec, grid: TimeGrid, config: EngineConfig) -> Result<Self> {
        if chain.states() != spec.states() {
            return Err(Error::Config(format!(
                "chain has {} states but the cash flow has {}",
                chain.states(),
                spec.states()
            )));
        }
        check_inner(config.n_inner, config.antithetic)?;
        let dates = spec.date_indices(&grid)?;
        let cache = TransitionCache::new(chain, grid)?;
        Ok(Self {
            model,
            spec,
            cache,
            config,
            dates,
        })
    }

    pub fn model(&self) -> &MarketModel {
        &self.model
    }

    pub fn chain(&self) -> &MarkovModel {
        self.cache.model()
    }

    pub fn spec(&self) -> &CashflowSpec {
        &self.spec
    }

    pub fn grid(&self) -> &TimeGrid {
        self.cache.grid()
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn transitions(&self) -> &TransitionCache {
        &self.cache
    }

    fn check_stub(&self, sp: &StoppedPath) -> Result<()> {
        if sp.grid() != self.grid() {
            return Err(domain("stub path lives on a different grid"));
        }
        Ok(())
    }

    fn states(&self) -> usize {
        self.spec.states()
    }

    /// Calls `visit(functional, s, coef)` for every payment term with
    /// maturity node `s ≥ j`, where `coef(i)` is the weight of `U_s^φ` in
    /// `V_i` and `dcoef(i)` its time derivative.
    fn for_each_term<F>(&self, j: usize, mut visit: F) -> Result<()>
    where
        F: FnMut(&Arc<dyn PathFunctional>, usize, &dyn Fn(usize) -> Result<(f64, f64)>) -> Result<()>,
    {
        let grid = self.grid();
        let m = grid.steps();
        let n = self.states();
        let t = grid.node(j);
        let chain = self.chain();
        let weights = grid.trapezoid_weights(j, m);
        // ∂_t p_ia(t,s) = Σ_{k≠i} μ_ik(t)(p_ia − p_ka)
        let dp = |s: usize, i: usize, a: usize| -> Result<f64> {
            let path = self.cache.terminal(s)?;
            let mut acc = 0.0;
            for k in (0..n).filter(|&k| k != i) {
                let mu = chain.rate(i, k, t);
                if mu != 0.0 {
                    acc += mu * (path.p(j, i, a) - path.p(j, k, a));
                }
            }
            Ok(acc)
        };
        for a in 0..n {
            if let Some(f) = self.spec.jump(a) {
                for &d in self.dates.iter().filter(|&&d| d > j) {
                    let path = self.cache.terminal(d)?;
                    visit(f, d, &|i| Ok((path.p(j, i, a), dp(d, i, a)?)))?;
                }
            }
            if let Some(g) = self.spec.sojourn(a) {
                for s in j..=m {
                    let w = weights[s - j];
                    let path = self.cache.terminal(s)?;
                    visit(g, s, &|i| Ok((w * path.p(j, i, a), w * dp(s, i, a)?)))?;
                }
            }
            for b in (0..n).filter(|&b| b != a) {
                let Some(h) = self.spec.transition(a, b) else { continue };
                for s in j..=m {
                    let mu = chain.rate(a, b, grid.node(s));
                    let w = weights[s - j] * mu;
                    if w == 0.0 {
                        continue;
                    }
                    let path = self.cache.terminal(s)?;
                    visit(h, s, &|i| Ok((w * path.p(j, i, a), w * dp(s, i, a)?)))?;
                }
            }
        }
        Ok(())
    }

    fn closed_form_for(&self, f: &Arc<dyn PathFunctional>, s: usize) -> Option<ClosedForm> {
        let cf = f.closed_form(self.grid().node(s))?;
        match cf {
            ClosedForm::RunningAverage { .. } if self.model.curve.constant_rate().is_none() => None,
            _ => Some(cf),
        }
    }

    fn plan(&self, sp: &StoppedPath, closed_forms: bool) -> Result<Plan> {
        let grid = self.grid();
        let j = sp.stop_index();
        let m = grid.steps();
        let n = self.states();
        let t = sp.stop_time();
        let curve = &self.model.curve;
        let disc = (j..=m)
            .map(|s| curve.discount_ratio(t, grid.node(s)))
            .collect::<Result<Vec<_>>>()?;
        let mut fixed = vec![0.0; n];
        let mut mc: Vec<Group> = Vec::new();
        self.for_each_term(j, |f, s, coef| {
            let cf = if closed_forms { self.closed_form_for(f, s) } else { None };
            if let Some(cf) = cf {
                let u = cf.value(curve, grid.node(s), sp)?;
                for (i, x) in fixed.iter_mut().enumerate() {
                    *x += coef(i)?.0 * u;
                }
                return Ok(());
            }
            let group = match mc.iter_mut().position(|g| Arc::ptr_eq(&g.functional, f)) {
                Some(k) => &mut mc[k],
                None => {
                    mc.push(Group {
                        functional: f.clone(),
                        coef: vec![vec![0.0; m + 1 - j]; n],
                    });
                    mc.last_mut().expect("just pushed")
                }
            };
            for i in 0..n {
                group.coef[i][s - j] += coef(i)?.0;
            }
            Ok(())
        })?;
        Ok(Plan { j, disc, mc, fixed })
    }

    /// Per-state aggregate of one inner path.
    fn aggregate(&self, plan: &Plan, path: &StoppedPath) -> Vec<f64> {
        let mut y = plan.fixed.clone();
        for g in &plan.mc {
            let vals = g.functional.eval_along(path, plan.j);
            for (i, yi) in y.iter_mut().enumerate() {
                let c = &g.coef[i];
                let mut acc = 0.0;
                for q in 0..vals.len() {
                    if c[q] != 0.0 {
                        acc += c[q] * plan.disc[q] * vals[q];
                    }
                }
                *yi += acc;
            }
        }
        y
    }

    fn inner_samples(&self, stubs: &[(&StoppedPath, &Plan)], seed: u64) -> Result<Vec<Vec<Vec<f64>>>> {
        let key = StreamKey::new(seed, DOMAIN_INNER);
        let m = self.grid().steps();
        let antithetic = self.config.antithetic;
        par::try_map_indices(self.config.n_inner, |k| {
            let (stream, sign) = stream_of(k, antithetic);
            stubs
                .iter()
                .map(|(sp, plan)| {
                    let path = if sp.is_complete() {
                        (*sp).clone()
                    } else {
                        self.model.continuation(sp, m, Measure::Q, key, stream, sign)?
                    };
                    let y = self.aggregate(plan, &path);
                    if let Some(bad) = y.iter().find(|v| !v.is_finite()) {
                        return Err(Error::Estimation {
                            seed,
                            index: k,
                            reason: format!("aggregate payoff {bad}"),
                        });
                    }
                    Ok(y)
                })
                .collect()
        })
    }

    /// Nested estimate of `V⃗_i(t, ω_t)` for every state.
    pub fn reserve_res2_all(&self, sp: &StoppedPath) -> Result<Vec<ReserveRow>> {
        self.check_stub(sp)?;
        let n = self.states();
        let t = sp.stop_time();
        let plan = self.plan(sp, self.config.closed_forms)?;
        let method = if plan.mc.is_empty() && self.config.closed_forms {
            Method::Oracle
        } else {
            Method::Res2Nested
        };
        if plan.mc.is_empty() {
            return Ok((0..n)
                .map(|i| ReserveRow {
                    state: i,
                    time: t,
                    value: plan.fixed[i],
                    std_error: 0.0,
                    n_outer: 1,
                    n_inner: 0,
                    method,
                    excess_kurtosis: 0.0,
                    heavy_tail: false,
                })
                .collect());
        }
        let samples = self.inner_samples(&[(sp, &plan)], self.config.seed)?;
        Ok((0..n)
            .map(|i| {
                let ys: Vec<f64> = samples.iter().map(|s| s[0][i]).collect();
                let s = summarize(&ys, self.config.antithetic);
                let heavy_tail = s.excess_kurtosis > HEAVY_TAIL_KURTOSIS;
                if heavy_tail {
                    log::warn!("state {i}, t={t}: heavy-tailed inner batch (excess kurtosis {:.1})", s.excess_kurtosis);
                }
                ReserveRow {
                    state: i,
                    time: t,
                    value: s.mean,
                    std_error: s.std_error,
                    n_outer: 1,
                    n_inner: self.config.n_inner,
                    method,
                    excess_kurtosis: s.excess_kurtosis,
                    heavy_tail,
                }
            })
            .collect())
    }

    pub fn reserve_res2(&self, i: usize, sp: &StoppedPath) -> Result<ReserveRow> {
        if i >= self.states() {
            return Err(domain(format!("state {i} out of range")));
        }
        Ok(self.reserve_res2_all(sp)?.swap_remove(i))
    }

    /// Mean prospective value over `n_outer` joint continuations: the asset
    /// continued under Q from `sp`, the chain restarted in `i` at `t`.
    pub fn reserve_res1_direct(&self, i: usize, sp: &StoppedPath, n_outer: usize, seed: u64) -> Result<ReserveRow> {
        self.check_stub(sp)?;
        if i >= self.states() {
            return Err(domain(format!("state {i} out of range")));
        }
        if n_outer < 2 {
            return Err(domain("need at least two outer samples"));
        }
        let grid = self.grid();
        let t = sp.stop_time();
        let chain = self.chain();
        let bounds = chain.scan_bounds(grid)?;
        let key_a = StreamKey::new(seed, DOMAIN_ASSET);
        let key_c = StreamKey::new(seed, DOMAIN_CHAIN);
        let m = grid.steps();
        let curve = &self.model.curve;
        let samples = par::try_map_indices(n_outer, |k| {
            let asset = if sp.is_complete() {
                sp.clone()
            } else {
                self.model.continuation(sp, m, Measure::Q, key_a, k as u64, 1.0)?
            };
            let traj = simulate_trajectory(chain, &bounds, i, t, grid.horizon(), key_c, k as u64)?;
            let scen = JointScenario::new(asset, traj)?;
            Ok(split_values(&cash_increments(&self.spec, &scen)?, curve, t).1)
        })?;
        let s = Summary::of(&samples);
        Ok(ReserveRow {
            state: i,
            time: t,
            value: s.mean,
            std_error: s.std_error,
            n_outer,
            n_inner: 0,
            method: Method::Res1Direct,
            excess_kurtosis: s.excess_kurtosis,
            heavy_tail: s.excess_kurtosis > HEAVY_TAIL_KURTOSIS,
        })
    }

    /// Reserves and analytic derivatives for every state, from closed-form
    /// `U` terms. Fails if some payment has no closed form.
    pub fn oracle_reserve(&self, sp: &StoppedPath) -> Result<(Vec<f64>, Vec<Derivatives>)> {
        self.check_stub(sp)?;
        let n = self.states();
        let grid = self.grid();
        let curve = &self.model.curve;
        let mut v = vec![0.0; n];
        let mut d = vec![Derivatives::default(); n];
        self.for_each_term(sp.stop_index(), |f, s, coef| {
            let cf = self
                .closed_form_for(f, s)
                .ok_or_else(|| domain(format!("payment {} has no closed form at s={}", f.name(), grid.node(s))))?;
            let u = cf.value(curve, grid.node(s), sp)?;
            let du = cf.derivatives(curve, grid.node(s), sp)?;
            for i in 0..n {
                let (c, dc) = coef(i)?;
                v[i] += c * u;
                d[i].horizontal += dc * u + c * du.horizontal;
                d[i].vertical += c * du.vertical;
                d[i].second_vertical += c * du.second_vertical;
            }
            Ok(())
        })?;
        if !sp.is_complete() {
            let t = sp.stop_time();
            let chain = self.chain();
            for (i, di) in d.iter_mut().enumerate() {
                // Leibniz term of the lower integration limit.
                let mut psi = slot_value(self.spec.sojourn(i), sp);
                for k in (0..n).filter(|&k| k != i) {
                    let mu = chain.rate(i, k, t);
                    if mu != 0.0 {
                        psi += mu * slot_value(self.spec.transition(i, k), sp);
                    }
                }
                di.horizontal -= psi;
            }
        }
        Ok((v, d))
    }

    /// Thiele residual of the closed-form reserve with analytic derivatives.
    pub fn thiele_residual_analytic(&self, i: usize, sp: &StoppedPath) -> Result<ThieleCheck> {
        if sp.is_complete() {
            return Err(domain("the Thiele equation is checked strictly before the horizon"));
        }
        let (v, d) = self.oracle_reserve(sp)?;
        let rate = self.model.curve.rate(sp.stop_time());
        let rhs = thiele_rhs(&self.spec, self.chain(), i, sp, &v, rate, apply_l(&d[i], sp, &self.model));
        Ok(ThieleCheck {
            state: i,
            time: sp.stop_time(),
            residual: d[i].horizontal - rhs,
            std_error: 0.0,
            truncation: 0.0,
            n_inner: 0,
            branch: Branch::Analytic,
        })
    }

    /// Thiele residual of the nested Monte Carlo reserve.
    ///
    /// The base stub, its flat extensions by one and two steps and its
    /// two vertical bumps are continued with the same inner streams, and
    /// the residual is formed path by path, so its standard error comes
    /// straight from the per-path residuals.
    pub fn thiele_residual_mc(&self, i: usize, sp: &StoppedPath) -> Result<ThieleCheck> {
        self.check_stub(sp)?;
        if i >= self.states() {
            return Err(domain(format!("state {i} out of range")));
        }
        let grid = self.grid();
        let j = sp.stop_index();
        if j + 1 > grid.steps() {
            return Err(domain("the Thiele equation is checked strictly before the horizon"));
        }
        let steps = self.config.bumps.horizontal_steps.max(1);
        let j1 = (j + steps).min(grid.steps());
        let j2 = (j + 2 * steps).min(grid.steps());
        let h = self.config.bumps.vertical_size(sp);
        let ext1 = sp.extend_to_index(j1)?;
        let ext2 = sp.extend_to_index(j2)?;
        let up = sp.vertical_bump(h);
        let dn = sp.vertical_bump(-h);
        let cf = self.config.closed_forms;
        let plans = [
            self.plan(sp, cf)?,
            self.plan(&ext1, cf)?,
            self.plan(&ext2, cf)?,
            self.plan(&up, cf)?,
            self.plan(&dn, cf)?,
        ];
        let stubs = [sp, &ext1, &ext2, &up, &dn];
        let pairs: Vec<(&StoppedPath, &Plan)> = stubs.iter().copied().zip(plans.iter()).collect();
        let samples = self.inner_samples(&pairs, self.config.seed)?;

        let t = sp.stop_time();
        let dt1 = grid.node(j1) - t;
        let dt2 = grid.node(j2) - t;
        let rate = self.model.curve.rate(t);
        let w = sp.last();
        let sigma = self.model.volatility.eval(sp);
        let (residuals, truncations): (Vec<f64>, Vec<f64>) = samples
            .iter()
            .map(|y| {
                let [base, e1, e2, u, d] = [&y[0], &y[1], &y[2], &y[3], &y[4]];
                let d1 = (e1[i] - base[i]) / dt1;
                let d2 = if j2 > j1 { (e2[i] - base[i]) / dt2 } else { d1 };
                let grad = (u[i] - d[i]) / (2.0 * h);
                let grad2 = (u[i] - 2.0 * base[i] + d[i]) / (h * h);
                let l = w * rate * grad + 0.5 * w * w * sigma * sigma * grad2;
                let rhs = thiele_rhs(&self.spec, self.chain(), i, sp, base, rate, l);
                (d1 - rhs, d1 - d2)
            })
            .unzip();
        let r = summarize(&residuals, self.config.antithetic);
        let tr = summarize(&truncations, self.config.antithetic);
        Ok(ThieleCheck {
            state: i,
            time: t,
            residual: r.mean,
            std_error: r.std_error,
            truncation: tr.mean.abs(),
            n_inner: self.config.n_inner,
            branch: Branch::MonteCarlo,
        })
    }
}

/// `V_i` as a path functional backed by the closed-form reserve.
pub struct OracleReserve {
    pub engine: Arc<ReserveEngine>,
    pub state: usize,
}

impl PathFunctional for OracleReserve {
    fn eval(&self, path: &StoppedPath) -> f64 {
        self.engine
            .oracle_reserve(path)
            .map(|(v, _)| v[self.state])
            .unwrap_or(f64::NAN)
    }

    fn name(&self) -> String {
        format!("oracle-reserve[{}]", self.state)
    }

    fn analytic_derivatives(&self, path: &StoppedPath) -> Option<Derivatives> {
        self.engine.oracle_reserve(path).ok().map(|(_, d)| d[self.state])
    }
}

/// `V_i` as a path functional backed by the nested estimator.
pub struct NestedReserve {
    pub engine: Arc<ReserveEngine>,
    pub state: usize,
}

impl PathFunctional for NestedReserve {
    fn eval(&self, path: &StoppedPath) -> f64 {
        self.engine
            .reserve_res2(self.state, path)
            .map(|r| r.value)
            .unwrap_or(f64::NAN)
    }

    fn name(&self) -> String {
        format!("nested-reserve[{}]", self.state)
    }
}

/// One functional per state.
pub fn reserve_functionals(engine: &Arc<ReserveEngine>, oracle: bool) -> Vec<Arc<dyn PathFunctional>> {
    (0..engine.states())
        .map(|state| {
            let engine = engine.clone();
            if oracle {
                Arc::new(OracleReserve { engine, state }) as Arc<dyn PathFunctional>
            } else {
                Arc::new(NestedReserve { engine, state }) as Arc<dyn PathFunctional>
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asian_oracle::{asian_u, AsianOracleParams};
    use crate::market::{simulate, DiscountCurve};
    use crate::payoffs::{Dated, Payoff};
    use crate::policy_chain::RateFn;
    use crate::stopped_paths::functional;

    fn bs(r: f64, sigma: f64) -> MarketModel {
        MarketModel::risk_neutral_black_scholes(1.0, r, sigma).unwrap()
    }

    fn cfg(n_inner: usize, seed: u64) -> EngineConfig {
        EngineConfig {
            n_inner,
            seed,
            ..EngineConfig::default()
        }
    }

    fn term(horizon: f64) -> CashflowSpec {
        CashflowSpec::zero(2, horizon)
            .unwrap()
            .with_transition(0, 1, Payoff::Constant { amount: 1.0 }.into_functional())
            .unwrap()
    }

    fn term_closed_form(r: f64, mu: f64, tau: f64) -> f64 {
        mu * (1.0 - (-(r + mu) * tau).exp()) / (r + mu)
    }

    #[test]
    fn estimate_u_final_condition_and_martingale() {
        let g = TimeGrid::uniform(1.0, 32).unwrap();
        let end = Payoff::Endpoint { scale: 1.0 }.into_functional();
        let est = UEstimator::new(end.clone(), 1.0, 4000, bs(0.03, 0.2)).unwrap();
        let full = StoppedPath::from_fn(g.clone(), 32, |s| 1.0 + s).unwrap();
        assert_eq!(est.estimate(&full, 1).unwrap(), (2.0, 0.0));
        let stub = StoppedPath::from_fn(g.clone(), 10, |s| 1.0 + s).unwrap();
        let (u, se) = est.estimate(&stub, 2).unwrap();
        assert!((u - stub.last()).abs() < 4.0 * se, "{u} ± {se}");
        let late = UEstimator::new(end, 0.5, 10, bs(0.03, 0.2)).unwrap();
        assert!(late.estimate(&stub.extend_to_index(20).unwrap(), 0).is_err());
        assert!(UEstimator::new(Payoff::Constant { amount: 1.0 }.into_functional(), 1.0, 1, bs(0.0, 0.2)).is_err());
    }

    #[test]
    fn estimate_u_matches_asian_oracle() {
        let g = TimeGrid::uniform(1.0, 64).unwrap();
        let avg = Payoff::RunningAverage { scale: 1.0 }.into_functional();
        let est = UEstimator::new(avg, 1.0, 10_000, bs(0.03, 0.2)).unwrap();
        let stub = StoppedPath::constant(g, 1.0, 32).unwrap();
        let (u, se) = est.estimate(&stub, 11).unwrap();
        let oracle = asian_u(&AsianOracleParams::new(0.03, 1.0).unwrap(), &stub).unwrap();
        assert!((u - oracle).abs() < 4.0 * se, "{u} ± {se} vs {oracle}");
    }

    #[test]
    fn non_finite_payoff_reports_index() {
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        let bad = functional("bad", |p| if p.last() > 1.0 { f64::INFINITY } else { 0.0 });
        let est = UEstimator::new(bad, 1.0, 64, bs(0.0, 0.3)).unwrap();
        let stub = StoppedPath::constant(g, 1.0, 2).unwrap();
        assert!(matches!(est.estimate(&stub, 5), Err(Error::Estimation { seed: 5, .. })));
    }

    #[test]
    fn operator_l_examples() {
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        let sp = StoppedPath::constant(g, 2.0, 3).unwrap();
        let m = bs(0.03, 0.2);
        let end = functional("end", |p| p.last());
        assert!((operator_l(end.as_ref(), &sp, &m, &Bumps::default()).unwrap() - 0.06).abs() < 1e-9);
        let flat = Payoff::Constant { amount: 3.0 };
        assert_eq!(operator_l(&flat, &sp, &m, &Bumps::default()).unwrap(), 0.0);
        let oracle = crate::asian_oracle::AsianOracle::new(AsianOracleParams::new(0.03, 1.0).unwrap());
        let l = operator_l(&oracle, &sp, &m, &Bumps::default()).unwrap();
        let expected = 2.0 * (1.0 - (-0.03f64 * (1.0 - 3.0 / 8.0)).exp());
        assert!((l - expected).abs() < 1e-14);
    }

    #[test]
    fn zero_spec_gives_zero_everywhere() {
        let g = TimeGrid::uniform(1.0, 16).unwrap();
        let e = ReserveEngine::new(
            bs(0.03, 0.2),
            MarkovModel::two_state(0.5).unwrap(),
            CashflowSpec::zero(2, 1.0).unwrap(),
            g.clone(),
            cfg(64, 1),
        )
        .unwrap();
        let sp = StoppedPath::constant(g, 1.0, 4).unwrap();
        for row in e.reserve_res2_all(&sp).unwrap() {
            assert_eq!((row.value, row.std_error), (0.0, 0.0));
        }
        let r1 = e.reserve_res1_direct(0, &sp, 50, 2).unwrap();
        assert_eq!((r1.value, r1.std_error), (0.0, 0.0));
        let e = Arc::new(e);
        let v = reserve_functionals(&e, true);
        assert_eq!(thiele_residual(&v, e.spec(), e.chain(), 0, &sp, e.model(), &Bumps::default()).unwrap(), 0.0);
    }

    #[test]
    fn unit_maturity_payment_discounts_exactly() {
        let g = TimeGrid::uniform(2.0, 20).unwrap();
        let spec = CashflowSpec::zero(3, 2.0)
            .unwrap()
            .with_jump(0, Arc::new(Dated::new(vec![2.0], Payoff::Constant { amount: 1.0 }.into_functional())))
            .unwrap()
            .with_jump(1, Arc::new(Dated::new(vec![2.0], Payoff::Constant { amount: 1.0 }.into_functional())))
            .unwrap()
            .with_jump(2, Arc::new(Dated::new(vec![2.0], Payoff::Constant { amount: 1.0 }.into_functional())))
            .unwrap();
        let e = ReserveEngine::new(bs(0.04, 0.2), MarkovModel::disability_example(), spec, g.clone(), cfg(16, 0)).unwrap();
        for j in [0, 7, 19] {
            let sp = StoppedPath::constant(g.clone(), 1.0, j).unwrap();
            for row in e.reserve_res2_all(&sp).unwrap() {
                let exact = (-0.04 * (2.0 - g.node(j))).exp();
                assert!((row.value - exact).abs() < 1e-9, "{row:?}");
            }
        }
    }

    #[test]
    fn term_insurance_res2_and_res1() {
        let (r, mu, horizon) = (0.03, 0.4, 2.0);
        let g = TimeGrid::uniform(horizon, 200).unwrap();
        let e = ReserveEngine::new(bs(r, 0.2), MarkovModel::two_state(mu).unwrap(), term(horizon), g.clone(), cfg(8, 3)).unwrap();
        for j in [0, 50, 150] {
            let sp = StoppedPath::constant(g.clone(), 1.0, j).unwrap();
            let exact = term_closed_form(r, mu, horizon - g.node(j));
            let row = e.reserve_res2(0, &sp).unwrap();
            assert!((row.value - exact).abs() < 1e-5, "{row:?} vs {exact}");
            let d = e.reserve_res1_direct(0, &sp, 40_000, 4).unwrap();
            assert!((d.value - exact).abs() < 4.0 * d.std_error, "{d:?} vs {exact}");
            assert_eq!(e.reserve_res2(1, &sp).unwrap().value, 0.0);
        }
    }

    #[test]
    fn final_condition_is_structural() {
        let g = TimeGrid::uniform(1.0, 16).unwrap();
        let spec = CashflowSpec::new(2, vec![0.0, 0.5, 1.0])
            .unwrap()
            .with_jump(0, Payoff::RunningAverage { scale: 1.0 }.into_functional())
            .unwrap()
            .with_sojourn(0, Payoff::Constant { amount: -0.1 }.into_functional())
            .unwrap()
            .with_transition(0, 1, Payoff::Gmmb { guarantee: 1.0, scale: 1.0 }.into_functional())
            .unwrap();
        let e = Arc::new(ReserveEngine::new(bs(0.02, 0.2), MarkovModel::two_state(0.3).unwrap(), spec, g.clone(), cfg(32, 5)).unwrap());
        let battery = simulate(e.model(), &g, 6, Measure::Q, 1).unwrap().paths;
        let report = verify_final_condition(&reserve_functionals(&e, false), &battery, 1e-12).unwrap();
        assert!(report.passed() && report.max_abs == 0.0);
        let stub = battery[0].stop_at_index(3).unwrap();
        assert!(verify_final_condition(&reserve_functionals(&e, false), &[stub], 1e-12).is_err());
    }

    #[test]
    fn analytic_thiele_residual_vanishes() {
        let g = TimeGrid::uniform(2.0, 64).unwrap();
        let spec = CashflowSpec::new(3, vec![0.0, 1.0, 2.0])
            .unwrap()
            .with_jump(0, Payoff::RunningAverage { scale: 2.0 }.into_functional())
            .unwrap()
            .with_jump(1, Payoff::Endpoint { scale: 0.5 }.into_functional())
            .unwrap()
            .with_sojourn(0, Payoff::Constant { amount: -0.2 }.into_functional())
            .unwrap()
            .with_sojourn(1, Payoff::Endpoint { scale: 0.3 }.into_functional())
            .unwrap()
            .with_transition(0, 2, Payoff::RunningAverage { scale: 1.0 }.into_functional())
            .unwrap()
            .with_transition(1, 2, Payoff::Constant { amount: 1.0 }.into_functional())
            .unwrap();
        let e = ReserveEngine::new(bs(0.03, 0.25), MarkovModel::disability_example(), spec, g.clone(), cfg(16, 0)).unwrap();
        let paths = simulate(e.model(), &g, 4, Measure::Q, 8).unwrap().paths;
        for p in &paths {
            for j in [0, 10, 31, 32, 63] {
                let sp = p.stop_at_index(j).unwrap();
                for i in 0..3 {
                    let c = e.thiele_residual_analytic(i, &sp).unwrap();
                    assert!(c.residual.abs() < 1e-12, "{c:?}");
                }
            }
        }
    }

    #[test]
    fn mc_thiele_residual_for_term_insurance() {
        let (r, mu) = (0.03, 0.4);
        let g = TimeGrid::uniform(2.0, 128).unwrap();
        let e = ReserveEngine::new(bs(r, 0.2), MarkovModel::two_state(mu).unwrap(), term(2.0), g.clone(), cfg(64, 1)).unwrap();
        let sp = StoppedPath::constant(g, 1.0, 40).unwrap();
        let c = e.thiele_residual_mc(0, &sp).unwrap();
        assert_eq!(c.std_error, 0.0);
        assert!(c.residual.abs() < 5.0 * (c.std_error + c.truncation), "{c:?}");
    }

    #[test]
    fn res2_uses_closed_forms_when_asked() {
        let g = TimeGrid::uniform(1.0, 32).unwrap();
        let spec = CashflowSpec::zero(1, 1.0)
            .unwrap()
            .with_jump(0, Arc::new(Dated::new(vec![1.0], Payoff::RunningAverage { scale: 1.0 }.into_functional())))
            .unwrap();
        let chain = MarkovModel::single_state();
        let mut c = cfg(20_000, 6);
        let mc = ReserveEngine::new(bs(0.03, 0.2), chain.clone(), spec.clone(), g.clone(), c.clone()).unwrap();
        c.closed_forms = true;
        let cf = ReserveEngine::new(bs(0.03, 0.2), chain, spec, g.clone(), c).unwrap();
        let sp = StoppedPath::from_fn(g, 12, |s| 1.0 + 0.5 * s).unwrap();
        let a = mc.reserve_res2(0, &sp).unwrap();
        let b = cf.reserve_res2(0, &sp).unwrap();
        assert_eq!(b.method, Method::Oracle);
        assert_eq!(b.std_error, 0.0);
        assert!((a.value - b.value).abs() < 4.0 * a.std_error, "{a:?} {b:?}");
    }

    #[test]
    fn discounted_u_is_a_martingale_over_outer_paths() {
        let g = TimeGrid::uniform(1.0, 16).unwrap();
        let m = bs(0.05, 0.25);
        let outer = simulate(&m, &g, 200, Measure::Q, 31).unwrap();
        let est = UEstimator::new(Payoff::RunningMax { scale: 1.0 }.into_functional(), 1.0, 200, m.clone()).unwrap();
        let mut means = Vec::new();
        for j in [0, 4, 8, 12] {
            let xs: Vec<f64> = outer
                .paths
                .iter()
                .enumerate()
                .map(|(k, p)| m.curve.discount(g.node(j)) * est.estimate(&p.stop_at_index(j).unwrap(), 1000 + k as u64).unwrap().0)
                .collect();
            let s = Summary::of(&xs);
            means.push((s.mean, s.std_error));
        }
        let (m0, _) = means[0];
        for &(mj, se) in &means[1..] {
            assert!((mj - m0).abs() < 4.0 * se, "{means:?}");
        }
    }

    #[test]
    fn degenerate_volatility_solves_the_scalar_thiele_ode() {
        let (r, mu, horizon) = (0.03, 0.1, 4.0);
        let g = TimeGrid::uniform(horizon, 400).unwrap();
        let spec = CashflowSpec::zero(2, horizon)
            .unwrap()
            .with_transition(0, 1, Payoff::Endpoint { scale: 1.0 }.into_functional())
            .unwrap()
            .with_sojourn(0, Payoff::Constant { amount: -0.05 }.into_functional())
            .unwrap();
        let e = ReserveEngine::new(bs(r, 0.0), MarkovModel::two_state(mu).unwrap(), spec, g.clone(), cfg(4, 0)).unwrap();
        let x0 = 1.3;
        let v: Vec<f64> = (0..=400)
            .map(|j| {
                let sp = StoppedPath::from_fn(g.clone(), j, |s| x0 * (r * s).exp()).unwrap();
                let row = e.reserve_res2(0, &sp).unwrap();
                assert_eq!(row.std_error, 0.0);
                row.value
            })
            .collect();
        for j in 1..400 {
            let t = g.node(j);
            let dv = (v[j + 1] - v[j - 1]) / (2.0 * g.step(j));
            // dV/dt = rV − g − μ(h − V)
            let rhs = r * v[j] + 0.05 - mu * (x0 * (r * t).exp() - v[j]);
            assert!((dv - rhs).abs() < 1e-6, "t={t}: {dv} vs {rhs}");
        }
    }

    #[test]
    fn permuting_states_permutes_reserves() {
        let g = TimeGrid::uniform(1.0, 16).unwrap();
        let spec = CashflowSpec::new(3, vec![0.0, 1.0])
            .unwrap()
            .with_jump(0, Payoff::Gmmb { guarantee: 1.0, scale: 1.0 }.into_functional())
            .unwrap()
            .with_sojourn(1, Payoff::RunningAverage { scale: 0.4 }.into_functional())
            .unwrap()
            .with_transition(0, 2, Payoff::Endpoint { scale: 1.0 }.into_functional())
            .unwrap();
        let chain = MarkovModel::disability_example();
        let perm = [1, 2, 0];
        let a = ReserveEngine::new(bs(0.02, 0.2), chain.clone(), spec.clone(), g.clone(), cfg(256, 9)).unwrap();
        let b = ReserveEngine::new(bs(0.02, 0.2), chain.permuted(&perm).unwrap(), spec.permuted(&perm).unwrap(), g.clone(), cfg(256, 9)).unwrap();
        let sp = StoppedPath::from_fn(g, 5, |s| 1.0 + s).unwrap();
        let va = a.reserve_res2_all(&sp).unwrap();
        let vb = b.reserve_res2_all(&sp).unwrap();
        for i in 0..3 {
            assert!((va[i].value - vb[perm[i]].value).abs() <= 1e-12 * va[i].value.abs().max(1.0));
        }
    }

    #[test]
    fn nonnegative_payments_give_nonnegative_reserves() {
        let g = TimeGrid::uniform(1.0, 16).unwrap();
        let spec = CashflowSpec::new(3, vec![0.0, 0.5, 1.0])
            .unwrap()
            .with_jump(1, Payoff::RunningMax { scale: 1.0 }.into_functional())
            .unwrap()
            .with_sojourn(1, Payoff::Constant { amount: 0.3 }.into_functional())
            .unwrap()
            .with_transition(0, 2, Payoff::Gmmb { guarantee: 0.5, scale: 1.0 }.into_functional())
            .unwrap();
        let e = ReserveEngine::new(bs(0.02, 0.3), MarkovModel::disability_example(), spec, g.clone(), cfg(64, 2)).unwrap();
        for j in 0..=16 {
            let sp = StoppedPath::constant(g.clone(), 1.0, j).unwrap();
            assert!(e.reserve_res2_all(&sp).unwrap().iter().all(|r| r.value >= 0.0));
        }
    }

    #[test]
    fn reports_serialize() {
        let row = ReserveRow {
            state: 0,
            time: 0.5,
            value: 1.25,
            std_error: 0.01,
            n_outer: 1,
            n_inner: 64,
            method: Method::Res2Nested,
            excess_kurtosis: 0.0,
            heavy_tail: false,
        };
        let rep = ReserveReport { rows: vec![row] };
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "state,time,value,std_error,n_outer,n_inner,method,heavy_tail\n0,0.5,1.25,0.01,1,64,res2-nested,false\n"
        );
        assert!(rep.to_json().unwrap().contains("\"res2-nested\""));
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        assert!(ReserveEngine::new(bs(0.0, 0.2), MarkovModel::single_state(), CashflowSpec::zero(2, 1.0).unwrap(), g.clone(), cfg(8, 0)).is_err());
        assert!(ReserveEngine::new(bs(0.0, 0.2), MarkovModel::single_state(), CashflowSpec::zero(1, 2.0).unwrap(), g.clone(), cfg(8, 0)).is_err());
        assert!(ReserveEngine::new(bs(0.0, 0.2), MarkovModel::single_state(), CashflowSpec::zero(1, 1.0).unwrap(), g, cfg(7, 0)).is_err());
        let _ = RateFn::zero();
        let _ = DiscountCurve::constant(0.0).unwrap();
    }
}
