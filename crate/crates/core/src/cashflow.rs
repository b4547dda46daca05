//! The payment stream of a policy and its present, retrospective and
//! prospective values along a joint (asset, chain) scenario.
//!
//! Payments are jump amounts `f_i` at contract dates, sojourn rates `g_i`
//! paid continuously while in state `i`, and lump sums `h_ij` on a
//! transition `i → j`. Premiums carry a negative sign.

use std::fmt;
use std::sync::Arc;

use crate::error::{domain, Error, PaymentKind, Result};
use crate::market::DiscountCurve;
use crate::payoffs::Scaled;
use crate::policy_chain::{check_permutation, ChainTrajectory};
use crate::stopped_paths::{PathFunctional, StoppedPath, TimeGrid};

/// A payment functional, or `None` for an identically zero slot.
pub type Slot = Option<Arc<dyn PathFunctional>>;

#[derive(Clone)]
pub struct CashflowSpec {
    states: usize,
    jump_dates: Vec<f64>,
    jump: Vec<Slot>,
    sojourn: Vec<Slot>,
    transition: Vec<Slot>,
}

impl fmt::Debug for CashflowSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = |slots: &[Slot]| -> Vec<String> {
            slots
                .iter()
                .map(|s| s.as_ref().map_or_else(|| "0".to_string(), |p| p.name()))
                .collect()
        };
        f.debug_struct("CashflowSpec")
            .field("states", &self.states)
            .field("jump_dates", &self.jump_dates)
            .field("jump", &names(&self.jump))
            .field("sojourn", &names(&self.sojourn))
            .field("transition", &names(&self.transition))
            .finish()
    }
}

impl CashflowSpec {
    /// An all-zero spec; `jump_dates` must start at 0 and end at the horizon.
    pub fn new(states: usize, jump_dates: Vec<f64>) -> Result<Self> {
        if states == 0 {
            return Err(domain("cash flow needs at least one state"));
        }
        if jump_dates.len() < 2 || jump_dates[0] != 0.0 {
            return Err(domain("jump dates must run from t_0 = 0 to t_n = T"));
        }
        if jump_dates.windows(2).any(|w| w[1] <= w[0]) {
            return Err(domain("jump dates must be strictly increasing"));
        }
        Ok(Self {
            states,
            jump_dates,
            jump: vec![None; states],
            sojourn: vec![None; states],
            transition: vec![None; states * states],
        })
    }

    pub fn zero(states: usize, horizon: f64) -> Result<Self> {
        Self::new(states, vec![0.0, horizon])
    }

    fn check_state(&self, i: usize) -> Result<()> {
        if i < self.states {
            Ok(())
        } else {
            Err(domain(format!("state {i} out of range")))
        }
    }

    pub fn with_jump(mut self, i: usize, f: Arc<dyn PathFunctional>) -> Result<Self> {
        self.check_state(i)?;
        self.jump[i] = Some(f);
        Ok(self)
    }

    pub fn with_sojourn(mut self, i: usize, g: Arc<dyn PathFunctional>) -> Result<Self> {
        self.check_state(i)?;
        self.sojourn[i] = Some(g);
        Ok(self)
    }

    pub fn with_transition(mut self, i: usize, j: usize, h: Arc<dyn PathFunctional>) -> Result<Self> {
        self.check_state(i)?;
        self.check_state(j)?;
        if i == j {
            return Err(domain("transition payments need i ≠ j"));
        }
        self.transition[i * self.states + j] = Some(h);
        Ok(self)
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn horizon(&self) -> f64 {
        *self.jump_dates.last().expect("non-empty")
    }

    pub fn jump_dates(&self) -> &[f64] {
        &self.jump_dates
    }

    pub fn jump(&self, i: usize) -> &Slot {
        &self.jump[i]
    }

    pub fn sojourn(&self, i: usize) -> &Slot {
        &self.sojourn[i]
    }

    pub fn transition(&self, i: usize, j: usize) -> &Slot {
        &self.transition[i * self.states + j]
    }

    pub fn is_zero(&self) -> bool {
        self.jump.iter().chain(&self.sojourn).chain(&self.transition).all(Option::is_none)
    }

    /// Every functional multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let wrap = |s: &Slot| -> Slot {
            s.as_ref().map(|inner| {
                Arc::new(Scaled {
                    factor,
                    inner: inner.clone(),
                }) as Arc<dyn PathFunctional>
            })
        };
        Self {
            states: self.states,
            jump_dates: self.jump_dates.clone(),
            jump: self.jump.iter().map(wrap).collect(),
            sojourn: self.sojourn.iter().map(wrap).collect(),
            transition: self.transition.iter().map(wrap).collect(),
        }
    }

    /// Relabels states: old state `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.states)?;
        let n = self.states;
        let mut out = Self::new(n, self.jump_dates.clone())?;
        for i in 0..n {
            out.jump[perm[i]] = self.jump[i].clone();
            out.sojourn[perm[i]] = self.sojourn[i].clone();
            for j in 0..n {
                out.transition[perm[i] * n + perm[j]] = self.transition[i * n + j].clone();
            }
        }
        Ok(out)
    }

    /// Grid indices of the jump dates; every date must be a node and the
    /// last one the grid horizon.
    pub fn date_indices(&self, grid: &TimeGrid) -> Result<Vec<usize>> {
        if (grid.horizon() - self.horizon()).abs() > 1e-12 * grid.horizon().max(1.0) {
            return Err(domain(format!(
                "contract horizon {} differs from grid horizon {}",
                self.horizon(),
                grid.horizon()
            )));
        }
        self.jump_dates
            .iter()
            .map(|&d| grid.index_of(d).ok_or_else(|| domain(format!("jump date {d} is not a grid node"))))
            .collect()
    }
}

/// An asset path on `[0, T]` and a chain trajectory, independent.
#[derive(Debug, Clone, PartialEq)]
pub struct JointScenario {
    pub asset: StoppedPath,
    pub chain: ChainTrajectory,
}

impl JointScenario {
    pub fn new(asset: StoppedPath, chain: ChainTrajectory) -> Result<Self> {
        if !asset.is_complete() {
            return Err(domain("scenario asset path must run to the horizon"));
        }
        if (asset.horizon() - chain.horizon).abs() > 1e-12 * asset.horizon().max(1.0) {
            return Err(domain("asset and chain horizons differ"));
        }
        if asset.grid().index_of(chain.start).is_none() {
            return Err(domain(format!("chain start {} is not a grid node", chain.start)));
        }
        Ok(Self { asset, chain })
    }
}

/// One booked payment. Sojourn pieces cover `[from, time]` with the rate
/// varying linearly from `rate_from` to `rate_to`; atoms have `from == time`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CashEvent {
    pub time: f64,
    pub amount: f64,
    pub kind: PaymentKind,
    pub from: f64,
    pub rate_from: f64,
    pub rate_to: f64,
}

impl CashEvent {
    fn atom(time: f64, amount: f64, kind: PaymentKind) -> Self {
        Self {
            time,
            amount,
            kind,
            from: time,
            rate_from: 0.0,
            rate_to: 0.0,
        }
    }

    /// `∫ v dC` over the event: `v(time)·amount` for atoms, trapezoid for
    /// sojourn pieces.
    pub fn discounted(&self, curve: &DiscountCurve) -> f64 {
        match self.kind {
            PaymentKind::Sojourn => {
                0.5 * (self.time - self.from)
                    * (curve.discount(self.from) * self.rate_from + curve.discount(self.time) * self.rate_to)
            }
            _ => curve.discount(self.time) * self.amount,
        }
    }
}

fn checked(v: f64, time: f64, kind: PaymentKind) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Cashflow {
            time,
            kind,
            reason: format!("functional returned {v}"),
        })
    }
}

/// The payment stream of `scen` from the chain start to `T`, in time order.
///
/// Sojourn pieces are split at grid nodes and chain events and booked at
/// their right end; the rate at an off-grid event time interpolates the
/// node values. Transition sums read the path at the last node at or
/// before the event.
pub fn cash_increments(spec: &CashflowSpec, scen: &JointScenario) -> Result<Vec<CashEvent>> {
    let asset = &scen.asset;
    let grid = asset.grid();
    let n = spec.states;
    let dates = spec.date_indices(grid)?;
    let j0 = grid.index_of(scen.chain.start).ok_or_else(|| domain("chain start off the grid"))?;
    let m = grid.steps();

    let mut sojourn: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut jumps: Vec<Option<Vec<f64>>> = vec![None; n];

    let mut events = Vec::new();
    let mut date_iter = dates.iter().copied().filter(|&k| k >= j0).peekable();
    let mut chain_iter = scen.chain.events.iter().peekable();
    let mut z = scen.chain.initial;

    for k in j0..=m {
        let uk = grid.node(k);
        if date_iter.peek() == Some(&k) {
            date_iter.next();
            if let Some(f) = &spec.jump[z] {
                let vals = jumps[z].get_or_insert_with(|| f.eval_along(asset, j0));
                let v = checked(vals[k - j0], uk, PaymentKind::Jump)?;
                events.push(CashEvent::atom(uk, v, PaymentKind::Jump));
            }
        }
        if k == m {
            break;
        }
        let uk1 = grid.node(k + 1);
        let dt = uk1 - uk;
        let mut a = uk;
        loop {
            let next_event = chain_iter.peek().filter(|e| e.time <= uk1).copied();
            let b = next_event.map_or(uk1, |e| e.time);
            if b > a {
                if let Some(gf) = &spec.sojourn[z] {
                    let g = sojourn[z].get_or_insert_with(|| gf.eval_along(asset, j0));
                    let g0 = checked(g[k - j0], uk, PaymentKind::Sojourn)?;
                    let g1 = checked(g[k + 1 - j0], uk1, PaymentKind::Sojourn)?;
                    let at = |s: f64| g0 + (g1 - g0) * (s - uk) / dt;
                    let (ra, rb) = (at(a), at(b));
                    events.push(CashEvent {
                        time: b,
                        amount: 0.5 * (b - a) * (ra + rb),
                        kind: PaymentKind::Sojourn,
                        from: a,
                        rate_from: ra,
                        rate_to: rb,
                    });
                }
                a = b;
            }
            let Some(e) = next_event else { break };
            chain_iter.next();
            if let Some(h) = spec.transition(e.from, e.to) {
                let node = grid.floor_index(e.time).unwrap_or(k).min(k + 1);
                let v = checked(h.eval(&asset.stop_at_index(node)?), e.time, PaymentKind::Transition)?;
                events.push(CashEvent::atom(e.time, v, PaymentKind::Transition));
            }
            z = e.to;
        }
    }
    Ok(events)
}

fn check_time(spec: &CashflowSpec, t: f64) -> Result<()> {
    if !(t >= 0.0 && t <= spec.horizon()) {
        return Err(domain(format!("valuation time {t} outside [0, {}]", spec.horizon())));
    }
    Ok(())
}

/// `(V⃖(t), V⃗(t))` of a booked stream: events at or before `t` go to the
/// retrospective side.
pub fn split_values(events: &[CashEvent], curve: &DiscountCurve, t: f64) -> (f64, f64) {
    let vt = curve.discount(t);
    let (mut retro, mut pro) = (0.0, 0.0);
    for e in events {
        let d = e.discounted(curve);
        if e.time <= t {
            retro += d;
        } else {
            pro += d;
        }
    }
    (retro / vt, pro / vt)
}

/// `V(t) = V⃖(t) + V⃗(t)`.
pub fn present_value(spec: &CashflowSpec, scen: &JointScenario, curve: &DiscountCurve, t: f64) -> Result<f64> {
    check_time(spec, t)?;
    let (r, p) = split_values(&cash_increments(spec, scen)?, curve, t);
    Ok(r + p)
}

pub fn retrospective_value(spec: &CashflowSpec, scen: &JointScenario, curve: &DiscountCurve, t: f64) -> Result<f64> {
    check_time(spec, t)?;
    Ok(split_values(&cash_increments(spec, scen)?, curve, t).0)
}

pub fn prospective_value(spec: &CashflowSpec, scen: &JointScenario, curve: &DiscountCurve, t: f64) -> Result<f64> {
    check_time(spec, t)?;
    Ok(split_values(&cash_increments(spec, scen)?, curve, t).1)
}
