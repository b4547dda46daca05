//! Closed-form conditional values for the running-average payoff
//! `φ(s, ω) = (1/s)∫₀ˢ ω(v) dv` under any risk-neutral model with a
//! constant short rate:
//!
//! ```text
//! U(t, ω_t) = e^{−r(s−t)}/s · ∫₀ᵗ ω + ω(t)·(1 − e^{−r(s−t)})/(r s)
//! DU        = r e^{−r(s−t)}/s · ∫₀ᵗ ω
//! ∇U        = (1 − e^{−r(s−t)})/(r s)
//! ∇²U       = 0
//! ```
//!
//! These serve as ground truth for every numeric estimator in the crate.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::functional_calculus::Derivatives;
use crate::market::DiscountCurve;
use crate::stopped_paths::{PathFunctional, StoppedPath};

/// Below this rate the `1/r` factors switch to their series limit.
pub const SMALL_RATE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsianOracleParams {
    /// Constant short rate per year.
    pub rate: f64,
    /// Payoff maturity `s`.
    pub maturity: f64,
}

impl AsianOracleParams {
    pub fn new(rate: f64, maturity: f64) -> Result<Self> {
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(domain(format!("oracle rate must be non-negative, got {rate}")));
        }
        if !(maturity > 0.0 && maturity.is_finite()) {
            return Err(domain(format!("oracle maturity must be positive, got {maturity}")));
        }
        Ok(Self { rate, maturity })
    }

    fn check(&self, t: f64) -> Result<()> {
        if t > self.maturity * (1.0 + 1e-12) {
            return Err(domain(format!(
                "stop time {t} is after the payoff maturity {}",
                self.maturity
            )));
        }
        Ok(())
    }

    /// `(1 − e^{−r τ})/(r s)` with `τ = s − t`.
    fn annuity(&self, tau: f64) -> f64 {
        let (r, s) = (self.rate, self.maturity);
        if r < SMALL_RATE {
            tau / s * (1.0 - 0.5 * r * tau)
        } else {
            -(-r * tau).exp_m1() / (r * s)
        }
    }
}

/// `U_s^φ(t, ω_t)` for the running average.
pub fn asian_u(params: &AsianOracleParams, sp: &StoppedPath) -> Result<f64> {
    let t = sp.stop_time();
    params.check(t)?;
    Ok(value_at(params, t, sp.path_integral(), sp.last()))
}

fn value_at(params: &AsianOracleParams, t: f64, integral: f64, spot: f64) -> f64 {
    let tau = (params.maturity - t).max(0.0);
    (-params.rate * tau).exp() / params.maturity * integral + spot * params.annuity(tau)
}

/// `(DU, ∇U, ∇²U)`.
pub fn asian_derivatives(params: &AsianOracleParams, sp: &StoppedPath) -> Result<Derivatives> {
    let t = sp.stop_time();
    params.check(t)?;
    let tau = (params.maturity - t).max(0.0);
    let r = params.rate;
    Ok(Derivatives {
        horizontal: r * (-r * tau).exp() / params.maturity * sp.path_integral(),
        vertical: params.annuity(tau),
        second_vertical: 0.0,
    })
}

/// `DU + ω(t) r ∇U + ½σ²ω(t)²∇²U − rU` from the analytic triple.
pub fn verify_pde_identity(params: &AsianOracleParams, sp: &StoppedPath, sigma: f64) -> Result<f64> {
    let d = asian_derivatives(params, sp)?;
    let u = asian_u(params, sp)?;
    let w = sp.last();
    let r = params.rate;
    Ok(d.horizontal + w * r * d.vertical + 0.5 * sigma * sigma * w * w * d.second_vertical - r * u)
}

/// Both sides of the dominating bound
/// `|U(u, ω_t)| ≤ sup_{v≤t}|ω(v)|·(1 + (1 − e^{−rs})/(rs))` for `t ≤ u ≤ s`.
pub fn assumption_bound(params: &AsianOracleParams, sp: &StoppedPath, u: f64) -> Result<(f64, f64)> {
    let t = sp.stop_time();
    if u < t || u > params.maturity {
        return Err(domain(format!(
            "bound needs t ≤ u ≤ s, got t={t}, u={u}, s={}",
            params.maturity
        )));
    }
    let spot = sp.last();
    let integral = sp.path_integral() + spot * (u - t);
    let lhs = value_at(params, u, integral, spot).abs();
    let rhs = sp.sup_abs() * (1.0 + params.annuity(params.maturity));
    Ok((lhs, rhs))
}

/// Analytic bounds on `|DU|` and `|∇U|` over `t ≤ u ≤ s`, constructed the
/// same way as [`assumption_bound`]:
/// `|DU| ≤ r·sup|ω|` and `|∇U| ≤ (1 − e^{−rs})/(rs)`.
pub fn derivative_bounds(params: &AsianOracleParams, sp: &StoppedPath) -> (f64, f64) {
    (params.rate * sp.sup_abs(), params.annuity(params.maturity))
}

/// The oracle `U_s^φ` as a functional with the analytic capability set.
#[derive(Debug, Clone, Copy)]
pub struct AsianOracle {
    pub params: AsianOracleParams,
    pub scale: f64,
}

impl AsianOracle {
    pub fn new(params: AsianOracleParams) -> Self {
        Self { params, scale: 1.0 }
    }
}

impl PathFunctional for AsianOracle {
    fn eval(&self, path: &StoppedPath) -> f64 {
        self.scale * asian_u(&self.params, path).unwrap_or(f64::NAN)
    }

    fn name(&self) -> String {
        format!("asian-oracle(s={})", self.params.maturity)
    }

    fn analytic_derivatives(&self, path: &StoppedPath) -> Option<Derivatives> {
        asian_derivatives(&self.params, path).ok().map(|d| Derivatives {
            horizontal: self.scale * d.horizontal,
            vertical: self.scale * d.vertical,
            second_vertical: self.scale * d.second_vertical,
        })
    }
}

/// Payoff families whose `U_s^φ(t, ω_t)` is known in closed form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ClosedForm {
    /// `φ ≡ amount`: `U = amount · v(s)/v(t)`.
    Constant { amount: f64 },
    /// `φ = scale·ω(s)`: `U = scale·ω(t)`.
    Endpoint { scale: f64 },
    /// `φ = scale·(1/s)∫₀ˢω`: the oracle above (constant rate only).
    RunningAverage { scale: f64 },
}

impl ClosedForm {
    pub fn scaled(self, factor: f64) -> Self {
        match self {
            ClosedForm::Constant { amount } => ClosedForm::Constant { amount: factor * amount },
            ClosedForm::Endpoint { scale } => ClosedForm::Endpoint { scale: factor * scale },
            ClosedForm::RunningAverage { scale } => ClosedForm::RunningAverage { scale: factor * scale },
        }
    }

    pub fn value(&self, curve: &DiscountCurve, maturity: f64, sp: &StoppedPath) -> Result<f64> {
        let t = sp.stop_time();
        match *self {
            ClosedForm::Constant { amount } => Ok(amount * curve.discount_ratio(t, maturity)?),
            ClosedForm::Endpoint { scale } => Ok(scale * sp.last()),
            ClosedForm::RunningAverage { scale } => {
                Ok(scale * asian_u(&self.params(curve, maturity)?, sp)?)
            }
        }
    }

    pub fn derivatives(&self, curve: &DiscountCurve, maturity: f64, sp: &StoppedPath) -> Result<Derivatives> {
        let t = sp.stop_time();
        match *self {
            ClosedForm::Constant { amount } => Ok(Derivatives {
                horizontal: curve.rate(t) * amount * curve.discount_ratio(t, maturity)?,
                ..Derivatives::default()
            }),
            ClosedForm::Endpoint { scale } => Ok(Derivatives {
                vertical: scale,
                ..Derivatives::default()
            }),
            ClosedForm::RunningAverage { scale } => {
                let d = asian_derivatives(&self.params(curve, maturity)?, sp)?;
                Ok(Derivatives {
                    horizontal: scale * d.horizontal,
                    vertical: scale * d.vertical,
                    second_vertical: scale * d.second_vertical,
                })
            }
        }
    }

    fn params(&self, curve: &DiscountCurve, maturity: f64) -> Result<AsianOracleParams> {
        let rate = curve
            .constant_rate()
            .ok_or_else(|| domain("running-average closed form needs a constant rate"))?;
        AsianOracleParams::new(rate, maturity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional_calculus::{horizontal_derivative_steps, second_vertical_derivative, vertical_derivative};
    use crate::stopped_paths::TimeGrid;

    fn grid() -> TimeGrid {
        TimeGrid::uniform(1.0, 512).unwrap()
    }

    #[test]
    fn final_condition_is_the_payoff() {
        let params = AsianOracleParams::new(0.04, 1.0).unwrap();
        let p = StoppedPath::from_fn(grid(), 512, |s| 1.0 + s).unwrap();
        let u = asian_u(&params, &p).unwrap();
        assert!((u - p.path_integral()).abs() < 1e-15);
        let d = asian_derivatives(&params, &p).unwrap();
        assert!((d.horizontal - 0.04 * p.path_integral()).abs() < 1e-15);
        assert_eq!(d.vertical, 0.0);
    }

    #[test]
    fn constant_and_initial_paths() {
        let (r, s, c) = (0.05, 1.0, 1.7);
        let params = AsianOracleParams::new(r, s).unwrap();
        let p = StoppedPath::constant(grid(), c, 256).unwrap();
        let t = 0.5;
        let e = (-r * (s - t)).exp();
        let expected = c * (e * t / s + (1.0 - e) / (r * s));
        assert!((asian_u(&params, &p).unwrap() - expected).abs() < 1e-14);
        let p0 = StoppedPath::constant(grid(), c, 0).unwrap();
        let expected0 = c * (1.0 - (-r * s).exp()) / (r * s);
        assert!((asian_u(&params, &p0).unwrap() - expected0).abs() < 1e-15);
    }

    #[test]
    fn derivative_table() {
        let params = AsianOracleParams::new(0.03, 1.0).unwrap();
        let zero = StoppedPath::constant(grid(), 0.0, 100).unwrap();
        let d = asian_derivatives(&params, &zero).unwrap();
        assert_eq!(d.horizontal, 0.0);
        let t = zero.stop_time();
        let expected = (1.0 - (-0.03f64 * (1.0 - t)).exp()) / 0.03;
        assert!((d.vertical - expected).abs() < 1e-14);
        assert_eq!(d.second_vertical, 0.0);
    }

    #[test]
    fn pde_identity_worked_case() {
        let params = AsianOracleParams::new(0.05, 1.0).unwrap();
        let p = StoppedPath::constant(grid(), 1.0, 256).unwrap();
        let u = (-0.025f64).exp() * 0.5 + (1.0 - (-0.025f64).exp()) / 0.05;
        assert!((asian_u(&params, &p).unwrap() - u).abs() < 1e-14);
        assert!(verify_pde_identity(&params, &p, 0.2).unwrap().abs() < 1e-14);
    }

    #[test]
    fn zero_rate_limit_is_continuous() {
        let p = StoppedPath::from_fn(grid(), 200, |s| 1.0 + 0.2 * s).unwrap();
        let tiny = asian_u(&AsianOracleParams::new(1e-9, 1.0).unwrap(), &p).unwrap();
        let small = asian_u(&AsianOracleParams::new(2e-8, 1.0).unwrap(), &p).unwrap();
        let zero = asian_u(&AsianOracleParams::new(0.0, 1.0).unwrap(), &p).unwrap();
        let t = p.stop_time();
        assert!((zero - (p.path_integral() + p.last() * (1.0 - t))).abs() < 1e-15);
        assert!((tiny - zero).abs() < 1e-8);
        assert!((small - zero).abs() < 1e-7);
    }

    #[test]
    fn rejects_stop_after_maturity() {
        let params = AsianOracleParams::new(0.03, 0.5).unwrap();
        let p = StoppedPath::constant(grid(), 1.0, 300).unwrap();
        assert!(asian_u(&params, &p).is_err());
        assert!(AsianOracleParams::new(-0.01, 1.0).is_err());
        assert!(AsianOracleParams::new(0.01, 0.0).is_err());
    }

    #[test]
    fn bound_examples() {
        let params = AsianOracleParams::new(0.03, 1.0).unwrap();
        let one = StoppedPath::constant(grid(), 1.0, 200).unwrap();
        for u in [one.stop_time(), 0.6, 0.9] {
            let (lhs, rhs) = assumption_bound(&params, &one, u).unwrap();
            assert!(lhs < rhs);
            assert!((rhs - (1.0 + (1.0 - (-0.03f64).exp()) / 0.03)).abs() < 1e-14);
        }
        let zero = StoppedPath::constant(grid(), 0.0, 200).unwrap();
        assert_eq!(assumption_bound(&params, &zero, 0.7).unwrap(), (0.0, 0.0));
        assert!(assumption_bound(&params, &one, 0.1).is_err());
    }

    #[test]
    fn numeric_derivatives_track_the_oracle() {
        let params = AsianOracleParams::new(0.03, 1.0).unwrap();
        let f = crate::stopped_paths::functional("asian", move |p| asian_u(&params, p).unwrap());
        let p = StoppedPath::from_fn(grid(), 300, |s| 1.0 + 0.3 * (5.0 * s).sin()).unwrap();
        let exact = asian_derivatives(&params, &p).unwrap();
        let d = horizontal_derivative_steps(f.as_ref(), &p, 1).unwrap().value;
        let v = vertical_derivative(f.as_ref(), &p, 1e-4).unwrap().value;
        let v2 = second_vertical_derivative(f.as_ref(), &p, 1e-4).unwrap().value;
        assert!((d - exact.horizontal).abs() < 5e-3);
        assert!((v - exact.vertical).abs() < 1e-9);
        assert!((v2 - exact.second_vertical).abs() < 1e-3);
    }

    #[test]
    fn closed_form_families() {
        let curve = DiscountCurve::constant(0.04).unwrap();
        let p = StoppedPath::from_fn(grid(), 128, |s| 2.0 - s).unwrap();
        let t = p.stop_time();
        let c = ClosedForm::Constant { amount: 3.0 };
        assert!((c.value(&curve, 1.0, &p).unwrap() - 3.0 * (-0.04 * (1.0 - t)).exp()).abs() < 1e-15);
        let e = ClosedForm::Endpoint { scale: 2.0 };
        assert_eq!(e.value(&curve, 1.0, &p).unwrap(), 2.0 * p.last());
        assert_eq!(e.derivatives(&curve, 1.0, &p).unwrap().vertical, 2.0);
        let ra = ClosedForm::RunningAverage { scale: 1.0 };
        let oracle = AsianOracleParams::new(0.04, 1.0).unwrap();
        assert_eq!(ra.value(&curve, 1.0, &p).unwrap(), asian_u(&oracle, &p).unwrap());
        let piecewise = DiscountCurve::piecewise(vec![0.0, 0.5], vec![0.01, 0.02]).unwrap();
        assert!(ra.value(&piecewise, 1.0, &p).is_err());
    }
}
