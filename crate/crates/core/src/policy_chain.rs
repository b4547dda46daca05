//! The policyholder state process: a finite Markov chain with continuous,
//! time-dependent transition intensities.
//!
//! States are numbered `0..N`. Transition probabilities come from the
//! backward Kolmogorov equation `∂_t P(t,s) = −Λ(t) P(t,s)`, solved with RK4
//! per terminal node `s`; trajectories are simulated exactly by thinning.

use std::io::Write;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::par;
use crate::rng::{StreamKey, DOMAIN_CHAIN};
use crate::stopped_paths::TimeGrid;

/// Row-sum drift tolerated per solved matrix.
pub const ROW_SUM_TOL: f64 = 1e-8;
/// Step-doubling tolerance of the RK4 integrator (entrywise).
const RK_TOL: f64 = 1e-12;
const MAX_SUBSTEPS: usize = 1 << 16;
/// Margin on the scanned sup of exit rates used for thinning.
const THINNING_MARGIN: f64 = 1.1;

/// Piecewise polynomial `μ(t) = Σ_j c_kj (t − b_k)^j` on `[b_k, b_{k+1})`,
/// continuous at the breaks. The last piece extends to the right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateFn {
    pub breaks: Vec<f64>,
    pub coeffs: Vec<Vec<f64>>,
}

impl RateFn {
    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn constant(c: f64) -> Self {
        Self {
            breaks: vec![0.0],
            coeffs: vec![vec![c]],
        }
    }

    /// `a + b·t`.
    pub fn linear(a: f64, b: f64) -> Self {
        Self {
            breaks: vec![0.0],
            coeffs: vec![vec![a, b]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.breaks.is_empty() || self.breaks.len() != self.coeffs.len() {
            return Err(Error::Config("rate table needs one coefficient row per break".into()));
        }
        if self.breaks[0] != 0.0 || self.breaks.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("rate breaks must start at 0 and increase".into()));
        }
        if self.coeffs.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Config("rate coefficients must be finite".into()));
        }
        for k in 1..self.breaks.len() {
            let b = self.breaks[k];
            let left = poly(&self.coeffs[k - 1], b - self.breaks[k - 1]);
            let right = poly(&self.coeffs[k], 0.0);
            if (left - right).abs() > 1e-9 * left.abs().max(1.0) {
                return Err(Error::Config(format!(
                    "rate table is discontinuous at t={b}: {left} vs {right}"
                )));
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = self.breaks.partition_point(|&b| b <= t).saturating_sub(1);
        poly(&self.coeffs[k], t - self.breaks[k])
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().flatten().all(|&c| c == 0.0)
    }
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, a| acc * x + a)
}

/// `N` states, intensities `μ_ij(t)` for `i ≠ j`, initial state `z0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovModel {
    states: usize,
    rates: Vec<RateFn>,
    z0: usize,
}

impl MarkovModel {
    /// `rates` lists `(i, j, μ_ij)`; absent pairs have zero intensity.
    pub fn new(states: usize, rates: Vec<(usize, usize, RateFn)>, z0: usize) -> Result<Self> {
        if states == 0 {
            return Err(Error::Config("chain needs at least one state".into()));
        }
        if z0 >= states {
            return Err(Error::Config(format!("initial state {z0} out of range")));
        }
        let mut table = vec![RateFn::zero(); states * states];
        for (i, j, f) in rates {
            if i >= states || j >= states {
                return Err(Error::Config(format!("transition {i}->{j} out of range")));
            }
            if i == j {
                return Err(Error::Config(format!("diagonal intensity {i}->{i} is implied")));
            }
            f.validate()?;
            table[i * states + j] = f;
        }
        Ok(Self {
            states,
            rates: table,
            z0,
        })
    }

    /// One state, no transitions.
    pub fn single_state() -> Self {
        Self::new(1, vec![], 0).expect("valid")
    }

    /// Alive (0) → dead (1) at constant intensity `mu`.
    pub fn two_state(mu: f64) -> Result<Self> {
        Self::new(2, vec![(0, 1, RateFn::constant(mu))], 0)
    }

    /// Active (0), disabled (1), dead (2) with recovery and ageing rates.
    pub fn disability_example() -> Self {
        Self::new(
            3,
            vec![
                (0, 1, RateFn::linear(0.05, 0.02)),
                (0, 2, RateFn::linear(0.01, 0.005)),
                (1, 0, RateFn::constant(0.3)),
                (1, 2, RateFn::linear(0.06, 0.03)),
            ],
            0,
        )
        .expect("valid")
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn z0(&self) -> usize {
        self.z0
    }

    pub fn with_initial_state(&self, z0: usize) -> Result<Self> {
        if z0 >= self.states {
            return Err(Error::Config(format!("initial state {z0} out of range")));
        }
        Ok(Self { z0, ..self.clone() })
    }

    pub fn rate_fn(&self, i: usize, j: usize) -> &RateFn {
        &self.rates[i * self.states + j]
    }

    pub fn rate(&self, i: usize, j: usize, t: f64) -> f64 {
        if i == j {
            0.0
        } else {
            self.rate_fn(i, j).eval(t)
        }
    }

    /// `μ_i(t) = Σ_{j≠i} μ_ij(t)`.
    pub fn exit_rate(&self, i: usize, t: f64) -> f64 {
        (0..self.states).map(|j| self.rate(i, j, t)).sum()
    }

    /// Row-major generator `Λ(t)` with `Λ_ii = −μ_i(t)`.
    pub fn generator(&self, t: f64) -> Vec<f64> {
        let n = self.states;
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            let mut exit = 0.0;
            for j in 0..n {
                if i != j {
                    let r = self.rate(i, j, t);
                    g[i * n + j] = r;
                    exit += r;
                }
            }
            g[i * n + i] = -exit;
        }
        g
    }

    /// Relabels states: old state `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.states)?;
        let n = self.states;
        let mut rates = vec![RateFn::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                rates[perm[i] * n + perm[j]] = self.rates[i * n + j].clone();
            }
        }
        Ok(Self {
            states: n,
            rates,
            z0: perm[self.z0],
        })
    }

    /// Checks intensities on grid nodes and midpoints and returns, per
    /// state, a thinning bound above the scanned sup of the exit rate.
    pub fn scan_bounds(&self, grid: &TimeGrid) -> Result<Vec<f64>> {
        let mut bounds = vec![0.0f64; self.states];
        let mut probe = |t: f64| -> Result<()> {
            for i in 0..self.states {
                for j in 0..self.states {
                    let r = self.rate(i, j, t);
                    if !r.is_finite() {
                        return Err(Error::Config(format!("μ_{i}{j}({t}) is not finite")));
                    }
                    if r < 0.0 {
                        return Err(Error::Config(format!("μ_{i}{j}({t}) = {r} is negative")));
                    }
                }
                bounds[i] = bounds[i].max(self.exit_rate(i, t));
            }
            Ok(())
        };
        for k in 0..grid.len() {
            probe(grid.node(k))?;
            if k < grid.steps() {
                probe(grid.node(k) + 0.5 * grid.step(k))?;
            }
        }
        Ok(bounds.into_iter().map(|b| b * THINNING_MARGIN).collect())
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(domain("permutation has the wrong length"));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(domain("not a permutation"));
        }
    }
    Ok(())
}

/// `P(u_k, s)` for every node `u_k ≤ s`, row-major `N×N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrixPath {
    pub s_index: usize,
    pub states: usize,
    matrices: Vec<Vec<f64>>,
}

impl TransitionMatrixPath {
    pub fn matrix(&self, k: usize) -> &[f64] {
        &self.matrices[k]
    }

    /// `p_ij(u_k, s)`.
    pub fn p(&self, k: usize, i: usize, j: usize) -> f64 {
        self.matrices[k][i * self.states + j]
    }
}

fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// RK4 in `τ = s − t` for `dP/dτ = Λ(s − τ) P`, over `[t1, t0]` backwards
/// in calendar time with `substeps` equal steps.
fn rk4_backward(model: &MarkovModel, p: &[f64], t0: f64, t1: f64, substeps: usize) -> Vec<f64> {
    let n = model.states;
    let h = (t0 - t1) / substeps as f64;
    let rhs = |t: f64, x: &[f64]| mat_mul(&model.generator(t), x, n);
    let axpy = |x: &[f64], k: &[f64], c: f64| x.iter().zip(k).map(|(a, b)| a + c * b).collect::<Vec<_>>();
    let mut x = p.to_vec();
    for m in 0..substeps {
        let t = t0 - m as f64 * h;
        let k1 = rhs(t, &x);
        let k2 = rhs(t - 0.5 * h, &axpy(&x, &k1, 0.5 * h));
        let k3 = rhs(t - 0.5 * h, &axpy(&x, &k2, 0.5 * h));
        let k4 = rhs(t - h, &axpy(&x, &k3, h));
        for q in 0..x.len() {
            x[q] += h / 6.0 * (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q]);
        }
    }
    x
}

fn max_row_drift(p: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|i| (p[i * n..(i + 1) * n].iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Solves the backward equation from `P(s, s) = I` down to `t = 0`.
///
/// Each grid step starts with one RK4 step and is halved until two
/// successive refinements agree and the row sums stay within tolerance.
pub fn kolmogorov_backward(model: &MarkovModel, s_index: usize, grid: &TimeGrid) -> Result<TransitionMatrixPath> {
    if s_index >= grid.len() {
        return Err(domain(format!("terminal node {s_index} is off the grid")));
    }
    let n = model.states;
    let mut identity = vec![0.0; n * n];
    for i in 0..n {
        identity[i * n + i] = 1.0;
    }
    let mut matrices = vec![Vec::new(); s_index + 1];
    let mut current = identity.clone();
    matrices[s_index] = identity;
    for k in (0..s_index).rev() {
        let (t0, t1) = (grid.node(k + 1), grid.node(k));
        let mut substeps = 1;
        let mut coarse = rk4_backward(model, &current, t0, t1, substeps);
        loop {
            let fine = rk4_backward(model, &current, t0, t1, 2 * substeps);
            let diff = coarse.iter().zip(&fine).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            substeps *= 2;
            coarse = fine;
            if diff < RK_TOL && max_row_drift(&coarse, n) < ROW_SUM_TOL {
                break;
            }
            if substeps > MAX_SUBSTEPS {
                return Err(domain(format!(
                    "Kolmogorov solver failed to converge on [{t1}, {t0}] (row drift {:.3e})",
                    max_row_drift(&coarse, n)
                )));
            }
        }
        current = coarse;
        matrices[k] = current.iter().map(|p| p.clamp(0.0, 1.0)).collect();
    }
    Ok(TransitionMatrixPath {
        s_index,
        states: n,
        matrices,
    })
}

/// Distribution of `Z(u_k)` given `Z(0) = z0`.
pub fn occupation_probabilities(model: &MarkovModel, t_index: usize, grid: &TimeGrid) -> Result<Vec<f64>> {
    let path = kolmogorov_backward(model, t_index, grid)?;
    let n = model.states;
    Ok(path.matrix(0)[model.z0 * n..(model.z0 + 1) * n].to_vec())
}

/// Lazily solved `P(·, s)` for every terminal node `s`, shared across threads.
#[derive(Debug)]
pub struct TransitionCache {
    model: MarkovModel,
    grid: TimeGrid,
    slots: Vec<OnceLock<std::result::Result<Arc<TransitionMatrixPath>, String>>>,
}

impl TransitionCache {
    pub fn new(model: MarkovModel, grid: TimeGrid) -> Result<Self> {
        model.scan_bounds(&grid)?;
        let slots = (0..grid.len()).map(|_| OnceLock::new()).collect();
        Ok(Self { model, grid, slots })
    }

    pub fn model(&self) -> &MarkovModel {
        &self.model
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn terminal(&self, s_index: usize) -> Result<Arc<TransitionMatrixPath>> {
        let slot = self.slots.get(s_index).ok_or_else(|| domain("terminal node off the grid"))?;
        slot.get_or_init(|| {
            kolmogorov_backward(&self.model, s_index, &self.grid)
                .map(Arc::new)
                .map_err(|e| e.to_string())
        })
        .clone()
        .map_err(Error::Domain)
    }

    /// `p_ij(u_t, u_s)` for `t ≤ s`.
    pub fn p(&self, t_index: usize, s_index: usize, i: usize, j: usize) -> Result<f64> {
        if t_index > s_index {
            return Err(domain(format!("p(t, s) needs t ≤ s, got nodes {t_index} > {s_index}")));
        }
        Ok(self.terminal(s_index)?.p(t_index, i, j))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainEvent {
    pub time: f64,
    pub from: usize,
    pub to: usize,
}

/// One realization of `Z` on `[start, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrajectory {
    pub initial: usize,
    pub start: f64,
    pub horizon: f64,
    pub events: Vec<ChainEvent>,
}

impl ChainTrajectory {
    pub fn constant(state: usize, start: f64, horizon: f64) -> Self {
        Self {
            initial: state,
            start,
            horizon,
            events: Vec::new(),
        }
    }

    /// Validates ordering and state continuity of the event list.
    pub fn new(initial: usize, start: f64, horizon: f64, events: Vec<ChainEvent>) -> Result<Self> {
        let mut state = initial;
        let mut last = start;
        for (k, e) in events.iter().enumerate() {
            let ordered = if k == 0 { e.time > start } else { e.time > last };
            if !ordered || e.time > horizon {
                return Err(domain(format!("event {k} at t={} is out of order", e.time)));
            }
            if e.from != state || e.from == e.to {
                return Err(domain(format!("event {k} leaves state {} but the chain is in {state}", e.from)));
            }
            state = e.to;
            last = e.time;
        }
        Ok(Self {
            initial,
            start,
            horizon,
            events,
        })
    }

    /// `Z(t)`, right-continuous.
    pub fn state_at(&self, t: f64) -> usize {
        let k = self.events.partition_point(|e| e.time <= t);
        if k == 0 {
            self.initial
        } else {
            self.events[k - 1].to
        }
    }

    /// `(I_i(t), N_ij(t))` with `N` row-major; a jump at `t` is counted.
    pub fn indicators(&self, t: f64, states: usize) -> (Vec<f64>, Vec<f64>) {
        let mut ind = vec![0.0; states];
        ind[self.state_at(t)] = 1.0;
        let mut counts = vec![0.0; states * states];
        for e in self.events.iter().take_while(|e| e.time <= t) {
            counts[e.from * states + e.to] += 1.0;
        }
        (ind, counts)
    }
}

pub fn indicators(traj: &ChainTrajectory, states: usize, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(t >= 0.0 && t <= traj.horizon) {
        return Err(domain(format!("t={t} outside [0, {}]", traj.horizon)));
    }
    Ok(traj.indicators(t, states))
}

/// One trajectory started in `state` at `start`, using stream `stream` of
/// the chain domain. `bounds` come from [`MarkovModel::scan_bounds`].
pub fn simulate_trajectory(
    model: &MarkovModel,
    bounds: &[f64],
    state: usize,
    start: f64,
    horizon: f64,
    key: StreamKey,
    stream: u64,
) -> Result<ChainTrajectory> {
    let mut rng = key.uniform(stream);
    let mut z = state;
    let mut t = start;
    let mut events = Vec::new();
    loop {
        let bound = bounds[z];
        if bound <= 0.0 {
            break;
        }
        t += rng.next_exp(bound);
        if t > horizon {
            break;
        }
        let exit = model.exit_rate(z, t);
        if exit > bound {
            return Err(Error::Config(format!(
                "exit rate {exit} of state {z} at t={t} exceeds the scanned bound {bound}"
            )));
        }
        let u = rng.next_open01() * bound;
        if u >= exit {
            continue;
        }
        let mut acc = 0.0;
        let mut target = z;
        for j in (0..model.states).filter(|&j| j != z) {
            let r = model.rate(z, j, t);
            if r > 0.0 {
                target = j;
                acc += r;
                if u < acc {
                    break;
                }
            }
        }
        events.push(ChainEvent { time: t, from: z, to: target });
        z = target;
    }
    Ok(ChainTrajectory {
        initial: state,
        start,
        horizon,
        events,
    })
}

/// `n` independent trajectories from `(0, z0)`.
pub fn simulate_chain(model: &MarkovModel, grid: &TimeGrid, n: usize, seed: u64) -> Result<Vec<ChainTrajectory>> {
    simulate_chain_from(model, grid, model.z0, 0.0, n, seed)
}

/// `n` trajectories restarted in `state` at time `start`.
pub fn simulate_chain_from(
    model: &MarkovModel,
    grid: &TimeGrid,
    state: usize,
    start: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<ChainTrajectory>> {
    if state >= model.states {
        return Err(domain(format!("state {state} out of range")));
    }
    let bounds = model.scan_bounds(grid)?;
    let key = StreamKey::new(seed, DOMAIN_CHAIN);
    par::try_map_indices(n, |p| simulate_trajectory(model, &bounds, state, start, grid.horizon(), key, p as u64))
}

/// CSV event list `path_id,time,from,to`.
pub fn write_events_csv<W: Write>(trajectories: &[ChainTrajectory], mut w: W) -> Result<()> {
    writeln!(w, "path_id,time,from,to")?;
    for (p, tr) in trajectories.iter().enumerate() {
        for e in &tr.events {
            writeln!(w, "{p},{},{},{}", e.time, e.from, e.to)?;
        }
    }
    Ok(())
}
