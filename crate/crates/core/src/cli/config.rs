//! Run configuration: a versioned TOML document describing the market, the
//! policyholder chain, the contract and the numerics of one run.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cashflow::CashflowSpec;
use crate::error::{Error, Result};
use crate::functional_calculus::Bumps;
use crate::market::{Coefficient, DiscountCurve, MarketModel, Measure};
use crate::payoffs::{Dated, Payoff, Scaled};
use crate::policy_chain::{MarkovModel, RateFn};
use crate::reserve_engine::EngineConfig;
use crate::stopped_paths::{PathFunctional, TimeGrid};

pub const SCHEMA: &str = "pathreserve/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    #[serde(default)]
    pub market: MarketConfig,
    #[serde(default)]
    pub chain: ChainConfig,
    #[serde(default)]
    pub cashflow: CashflowConfig,
    #[serde(default)]
    pub numerics: NumericsConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Constant per-unit drift and volatility.
    BlackScholes,
    /// `b̃ = drift·(1 + drift_slope·avg)`, `σ̃ = volatility·(1 + volatility_slope·avg)`
    /// with `avg` the running average of the path.
    AffineAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveConfig {
    pub breaks: Vec<f64>,
    pub rates: Vec<f64>,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            breaks: vec![0.0],
            rates: vec![0.03],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarketConfig {
    pub model: ModelKind,
    pub s0: f64,
    pub drift: f64,
    pub volatility: f64,
    pub drift_slope: f64,
    pub volatility_slope: f64,
    pub curve: CurveConfig,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::BlackScholes,
            s0: 1.0,
            drift: 0.05,
            volatility: 0.2,
            drift_slope: 0.0,
            volatility_slope: 0.0,
            curve: CurveConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateEntry {
    pub from: usize,
    pub to: usize,
    pub rate: RateFn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub states: usize,
    pub z0: usize,
    pub rates: Vec<RateEntry>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            states: 1,
            z0: 0,
            rates: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpEntry {
    pub state: usize,
    pub payoff: Payoff,
    /// Restricts the payment to these contract dates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dates: Option<Vec<f64>>,
    /// Scaled by the premium level in `solve-premium`.
    #[serde(default, skip_serializing_if = "is_false")]
    pub premium: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SojournEntry {
    pub state: usize,
    pub payoff: Payoff,
    #[serde(default, skip_serializing_if = "is_false")]
    pub premium: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionEntry {
    pub from: usize,
    pub to: usize,
    pub payoff: Payoff,
    #[serde(default, skip_serializing_if = "is_false")]
    pub premium: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CashflowConfig {
    /// Contract dates strictly inside `(0, T)`; `0` and `T` are implicit.
    pub jump_dates: Vec<f64>,
    pub jump: Vec<JumpEntry>,
    pub sojourn: Vec<SojournEntry>,
    pub transition: Vec<TransitionEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureName {
    P,
    Q,
}

impl From<MeasureName> for Measure {
    fn from(m: MeasureName) -> Self {
        match m {
            MeasureName::P => Measure::P,
            MeasureName::Q => Measure::Q,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsConfig {
    pub horizon: f64,
    pub steps: usize,
    pub n_outer: usize,
    pub n_inner: usize,
    pub antithetic: bool,
    pub closed_forms: bool,
    pub vertical_bump: f64,
    pub horizontal_steps: usize,
    pub seed: u64,
    /// Path count for `simulate`.
    pub paths: usize,
    pub measure: MeasureName,
    /// Valuation times for reports and checks.
    pub times: Vec<f64>,
    /// Number of history stubs in check batteries.
    pub stubs: usize,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 100,
            n_outer: 4096,
            n_inner: 4096,
            antithetic: true,
            closed_forms: false,
            vertical_bump: 1e-4,
            horizontal_steps: 1,
            seed: 0,
            paths: 100,
            measure: MeasureName::P,
            times: vec![0.0],
            stubs: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "out".into(),
            formats: vec![Format::Csv, Format::Json],
        }
    }
}

fn config_err(what: &str, e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(format!("{what}: {other}")),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Builds every component once so that invalid values surface as
    /// config errors before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA {
            return Err(Error::Config(format!("schema: expected \"{SCHEMA}\", got \"{}\"", self.schema)));
        }
        let n = &self.numerics;
        if n.n_inner < 2 || (n.antithetic && n.n_inner % 2 == 1) {
            return Err(Error::Config(format!("numerics.n_inner: need an even count ≥ 2, got {}", n.n_inner)));
        }
        if n.n_outer < 2 {
            return Err(Error::Config("numerics.n_outer: need at least 2".into()));
        }
        if !(n.vertical_bump > 0.0 && n.vertical_bump.is_finite()) || n.horizontal_steps == 0 {
            return Err(Error::Config("numerics: bump sizes must be positive".into()));
        }
        if let Some(t) = n.times.iter().find(|t| !(0.0..=n.horizon).contains(*t)) {
            return Err(Error::Config(format!("numerics.times: {t} outside [0, {}]", n.horizon)));
        }
        if self.output.formats.is_empty() {
            return Err(Error::Config("output.formats: empty".into()));
        }
        self.market_model()?;
        self.chain_model()?;
        let grid = self.grid()?;
        let spec = self.cashflow_spec(1.0)?;
        spec.date_indices(&grid).map_err(|e| config_err("cashflow.jump_dates", e))?;
        Ok(())
    }

    pub fn market_model(&self) -> Result<MarketModel> {
        let m = &self.market;
        if !(m.volatility >= 0.0 && m.volatility.is_finite()) {
            return Err(Error::Config(format!("market.volatility: must be non-negative, got {}", m.volatility)));
        }
        if ![m.drift, m.drift_slope, m.volatility_slope].iter().all(|x| x.is_finite()) {
            return Err(Error::Config("market: coefficients must be finite".into()));
        }
        let curve = DiscountCurve::piecewise(m.curve.breaks.clone(), m.curve.rates.clone())
            .map_err(|e| config_err("market.curve", e))?;
        let (drift, vol) = match m.model {
            ModelKind::BlackScholes => (Coefficient::Constant(m.drift), Coefficient::Constant(m.volatility)),
            ModelKind::AffineAverage => (
                Coefficient::AffineRunningAverage {
                    base: m.drift,
                    slope: m.drift_slope,
                },
                Coefficient::AffineRunningAverage {
                    base: m.volatility,
                    slope: m.volatility_slope,
                },
            ),
        };
        MarketModel::new(drift, vol, m.s0, curve).map_err(|e| config_err("market", e))
    }

    pub fn chain_model(&self) -> Result<MarkovModel> {
        let c = &self.chain;
        let rates = c.rates.iter().map(|r| (r.from, r.to, r.rate.clone())).collect();
        MarkovModel::new(c.states, rates, c.z0).map_err(|e| config_err("chain", e))
    }

    pub fn jump_dates(&self) -> Vec<f64> {
        let mut d = vec![0.0];
        d.extend(self.cashflow.jump_dates.iter().copied());
        d.push(self.numerics.horizon);
        d
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        let n = &self.numerics;
        let mut dates = self.jump_dates();
        dates.extend(n.times.iter().copied());
        TimeGrid::with_dates(n.horizon, n.steps, &dates).map_err(|e| config_err("numerics", e))
    }

    /// The contract with premium entries multiplied by `premium`.
    pub fn cashflow_spec(&self, premium: f64) -> Result<CashflowSpec> {
        self.spec_filtered(premium, true)
    }

    /// The contract with only its benefit (non-premium) entries.
    pub fn benefit_spec(&self) -> Result<CashflowSpec> {
        self.spec_filtered(0.0, false)
    }

    pub fn has_premium(&self) -> bool {
        let c = &self.cashflow;
        c.jump.iter().any(|e| e.premium) || c.sojourn.iter().any(|e| e.premium) || c.transition.iter().any(|e| e.premium)
    }

    fn spec_filtered(&self, premium: f64, keep_premium: bool) -> Result<CashflowSpec> {
        let states = self.chain.states;
        let c = &self.cashflow;
        let mut spec = CashflowSpec::new(states, self.jump_dates()).map_err(|e| config_err("cashflow.jump_dates", e))?;
        let make = |p: &Payoff, is_premium: bool, field: &str| -> Result<Option<Arc<dyn PathFunctional>>> {
            p.validate().map_err(|e| config_err(field, e))?;
            if is_premium && !keep_premium {
                return Ok(None);
            }
            let f = p.clone().into_functional();
            Ok(Some(if is_premium {
                Arc::new(Scaled { factor: premium, inner: f })
            } else {
                f
            }))
        };
        let mut seen = std::collections::HashSet::new();
        let mut claim = |slot: String| -> Result<()> {
            if seen.insert(slot.clone()) {
                Ok(())
            } else {
                Err(Error::Config(format!("cashflow: {slot} is defined twice")))
            }
        };
        for (k, e) in c.jump.iter().enumerate() {
            let field = format!("cashflow.jump[{k}]");
            claim(format!("jump payment of state {}", e.state))?;
            if let Some(mut f) = make(&e.payoff, e.premium, &field)? {
                if let Some(dates) = &e.dates {
                    f = Arc::new(Dated::new(dates.clone(), f));
                }
                spec = spec.with_jump(e.state, f).map_err(|er| config_err(&field, er))?;
            }
        }
        for (k, e) in c.sojourn.iter().enumerate() {
            let field = format!("cashflow.sojourn[{k}]");
            claim(format!("sojourn payment of state {}", e.state))?;
            if let Some(f) = make(&e.payoff, e.premium, &field)? {
                spec = spec.with_sojourn(e.state, f).map_err(|er| config_err(&field, er))?;
            }
        }
        for (k, e) in c.transition.iter().enumerate() {
            let field = format!("cashflow.transition[{k}]");
            claim(format!("transition payment {} -> {}", e.from, e.to))?;
            if let Some(f) = make(&e.payoff, e.premium, &field)? {
                spec = spec.with_transition(e.from, e.to, f).map_err(|er| config_err(&field, er))?;
            }
        }
        Ok(spec)
    }

    pub fn engine_config(&self) -> EngineConfig {
        let n = &self.numerics;
        EngineConfig {
            n_inner: n.n_inner,
            antithetic: n.antithetic,
            seed: n.seed,
            closed_forms: n.closed_forms,
            bumps: Bumps {
                vertical_rel: n.vertical_bump,
                horizontal_steps: n.horizontal_steps,
            },
        }
    }
}

/// A ready-to-edit term-insurance config.
pub fn example_config() -> &'static str {
    r#"schema = "pathreserve/1"

[market]
model = "black-scholes"
s0 = 1.0
drift = 0.06
volatility = 0.2
curve = { breaks = [0.0], rates = [0.03] }

[chain]
states = 2
z0 = 0
rates = [{ from = 0, to = 1, rate = { breaks = [0.0], coeffs = [[0.4]] } }]

[cashflow]
jump_dates = []
sojourn = [{ state = 0, payoff = { kind = "constant", amount = -1.0 }, premium = true }]
transition = [{ from = 0, to = 1, payoff = { kind = "constant", amount = 1.0 } }]

[numerics]
horizon = 2.0
steps = 100
n_outer = 4096
n_inner = 64
seed = 42
times = [0.0, 1.0]

[output]
dir = "out"
formats = ["csv", "json"]
"#
}
