//! Browser bindings for three engine operations. Every export returns a
//! JSON string (`{"error": ...}` on failure) so the page needs no
//! generated types.

use pathreserve::asian_oracle::{asian_u, AsianOracleParams};
use pathreserve::cashflow::CashflowSpec;
use pathreserve::market::{simulate, DiscountCurve, MarketModel, Measure};
use pathreserve::payoffs::Payoff;
use pathreserve::policy_chain::MarkovModel;
use pathreserve::reserve_engine::{EngineConfig, ReserveEngine, UEstimator};
use pathreserve::stopped_paths::{StoppedPath, TimeGrid};
use pathreserve::Result;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn respond(r: Result<Value>) -> String {
    r.unwrap_or_else(|e| json!({ "error": e.to_string() })).to_string()
}

fn even(n: usize) -> usize {
    (n.max(2) + 1) & !1
}

/// Asset paths under P or Q (`measure` is `"p"` or `"q"`).
#[wasm_bindgen]
pub fn simulate_paths(s0: f64, drift: f64, volatility: f64, rate: f64, horizon: f64, steps: usize, n: usize, measure: &str, seed: u64) -> String {
    respond((|| {
        let model = MarketModel::black_scholes(s0, drift, volatility, DiscountCurve::constant(rate)?)?;
        let grid = TimeGrid::uniform(horizon, steps)?;
        let measure = if measure.eq_ignore_ascii_case("q") { Measure::Q } else { Measure::P };
        let batch = simulate(&model, &grid, n.min(200), measure, seed)?;
        let paths: Vec<&[f64]> = batch.paths.iter().map(|p| p.values()).collect();
        Ok(json!({ "times": grid.nodes(), "paths": paths }))
    })())
}

/// Conditional value of the running-average payoff along one simulated
/// history: closed form against the nested estimate with its error bar.
#[wasm_bindgen]
pub fn asian_curve(rate: f64, volatility: f64, maturity: f64, steps: usize, points: usize, n_inner: usize, seed: u64) -> String {
    respond((|| {
        let model = MarketModel::risk_neutral_black_scholes(1.0, rate, volatility)?;
        let grid = TimeGrid::uniform(maturity, steps)?;
        let history = simulate(&model, &grid, 1, Measure::P, seed)?.paths.remove(0);
        let params = AsianOracleParams::new(rate, maturity)?;
        let est = UEstimator::new(Payoff::RunningAverage { scale: 1.0 }.into_functional(), maturity, even(n_inner), model)?;
        let mut rows = Vec::new();
        let points = points.clamp(2, steps + 1);
        for k in 0..points {
            let j = k * steps / (points - 1);
            let sp = history.stop_at_index(j)?;
            let (mc, se) = est.estimate(&sp, seed.wrapping_add(1 + k as u64))?;
            rows.push(json!({ "t": grid.node(j), "spot": sp.last(), "oracle": asian_u(&params, &sp)?, "mc": mc, "se": se }));
        }
        Ok(json!({ "history": history.values(), "times": grid.nodes(), "rows": rows }))
    })())
}

/// Term-insurance reserve `V(t)` from the engine next to the closed form.
#[wasm_bindgen]
pub fn term_reserve_curve(mortality: f64, rate: f64, horizon: f64, steps: usize) -> String {
    respond((|| {
        let grid = TimeGrid::uniform(horizon, steps)?;
        let spec = CashflowSpec::zero(2, horizon)?.with_transition(0, 1, Payoff::Constant { amount: 1.0 }.into_functional())?;
        let cfg = EngineConfig {
            n_inner: 2,
            ..EngineConfig::default()
        };
        let model = MarketModel::risk_neutral_black_scholes(1.0, rate, 0.0)?;
        let engine = ReserveEngine::new(model, MarkovModel::two_state(mortality)?, spec, grid.clone(), cfg)?;
        let mut engine_v = Vec::with_capacity(steps + 1);
        let mut exact = Vec::with_capacity(steps + 1);
        for j in 0..=steps {
            let sp = StoppedPath::constant(grid.clone(), 1.0, j)?;
            engine_v.push(engine.reserve_res2(0, &sp)?.value);
            let tau = horizon - grid.node(j);
            let k = rate + mortality;
            exact.push(if k > 0.0 { mortality * (1.0 - (-k * tau).exp()) / k } else { 0.0 });
        }
        Ok(json!({ "times": grid.nodes(), "engine": engine_v, "closed_form": exact }))
    })())
}
