//! Registry of built-in payment functionals.
//!
//! Every payoff is evaluated at the stop time of its argument, so
//! `payoff.eval(ω_t)` is `φ(t, ω_t)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::asian_oracle::ClosedForm;
use crate::error::{Error, Result};
use crate::functional_calculus::Derivatives;
use crate::stopped_paths::{PathFunctional, StoppedPath};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Payoff {
    Constant {
        amount: f64,
    },
    /// `scale·ω(t)`.
    Endpoint {
        #[serde(default = "one")]
        scale: f64,
    },
    /// `scale·(1/t)∫₀ᵗω`, `scale·ω(0)` at `t = 0`.
    RunningAverage {
        #[serde(default = "one")]
        scale: f64,
    },
    /// `scale·max_{s≤t} ω(s)`.
    RunningMax {
        #[serde(default = "one")]
        scale: f64,
    },
    /// Guaranteed minimum maturity benefit `max(guarantee, scale·ω(t))`.
    Gmmb {
        guarantee: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    /// Deterministic amount interpolated linearly in `t` from a table,
    /// flat outside it.
    Table { times: Vec<f64>, amounts: Vec<f64> },
}

fn one() -> f64 {
    1.0
}

impl Payoff {
    pub fn validate(&self) -> Result<()> {
        let finite = |x: f64, what: &str| {
            if x.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be finite")))
            }
        };
        match self {
            Payoff::Constant { amount } => finite(*amount, "amount"),
            Payoff::Endpoint { scale } | Payoff::RunningAverage { scale } | Payoff::RunningMax { scale } => {
                finite(*scale, "scale")
            }
            Payoff::Gmmb { guarantee, scale } => {
                finite(*guarantee, "guarantee")?;
                finite(*scale, "scale")
            }
            Payoff::Table { times, amounts } => {
                if times.is_empty() || times.len() != amounts.len() {
                    return Err(Error::Config("payoff table needs one amount per time".into()));
                }
                if times.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Config("payoff table times must increase".into()));
                }
                times.iter().chain(amounts).try_for_each(|x| finite(*x, "table entry"))
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Payoff::Constant { .. } => "constant",
            Payoff::Endpoint { .. } => "endpoint",
            Payoff::RunningAverage { .. } => "running-average",
            Payoff::RunningMax { .. } => "running-max",
            Payoff::Gmmb { .. } => "gmmb",
            Payoff::Table { .. } => "table",
        }
    }

    /// The same payoff with every amount multiplied by `factor`.
    /// Not available for `gmmb`, which is not linear in its parameters.
    pub fn scaled(&self, factor: f64) -> Option<Payoff> {
        Some(match self {
            Payoff::Constant { amount } => Payoff::Constant { amount: amount * factor },
            Payoff::Endpoint { scale } => Payoff::Endpoint { scale: scale * factor },
            Payoff::RunningAverage { scale } => Payoff::RunningAverage { scale: scale * factor },
            Payoff::RunningMax { scale } => Payoff::RunningMax { scale: scale * factor },
            Payoff::Table { times, amounts } => Payoff::Table {
                times: times.clone(),
                amounts: amounts.iter().map(|a| a * factor).collect(),
            },
            Payoff::Gmmb { .. } => return None,
        })
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Payoff::Constant { amount } => *amount == 0.0,
            Payoff::Endpoint { scale } | Payoff::RunningAverage { scale } | Payoff::RunningMax { scale } => {
                *scale == 0.0
            }
            Payoff::Gmmb { .. } => false,
            Payoff::Table { amounts, .. } => amounts.iter().all(|a| *a == 0.0),
        }
    }

    fn table_value(times: &[f64], amounts: &[f64], t: f64) -> f64 {
        let k = times.partition_point(|&u| u <= t);
        if k == 0 {
            amounts[0]
        } else if k == times.len() {
            amounts[k - 1]
        } else {
            let w = (t - times[k - 1]) / (times[k] - times[k - 1]);
            (1.0 - w) * amounts[k - 1] + w * amounts[k]
        }
    }

    pub fn into_functional(self) -> Arc<dyn PathFunctional> {
        Arc::new(self)
    }
}

impl PathFunctional for Payoff {
    fn eval(&self, p: &StoppedPath) -> f64 {
        match self {
            Payoff::Constant { amount } => *amount,
            Payoff::Endpoint { scale } => scale * p.last(),
            Payoff::RunningAverage { scale } => {
                let t = p.stop_time();
                if t > 0.0 {
                    scale * p.path_integral() / t
                } else {
                    scale * p.values()[0]
                }
            }
            Payoff::RunningMax { scale } => scale * p.running_max(),
            Payoff::Gmmb { guarantee, scale } => guarantee.max(scale * p.last()),
            Payoff::Table { times, amounts } => Self::table_value(times, amounts, p.stop_time()),
        }
    }

    fn name(&self) -> String {
        Payoff::name(self).to_string()
    }

    fn eval_along(&self, p: &StoppedPath, from: usize) -> Vec<f64> {
        let grid = p.grid();
        let vals = p.values();
        let range = from..=p.stop_index();
        match self {
            Payoff::Constant { amount } => vec![*amount; range.count()],
            Payoff::Endpoint { scale } => vals[range].iter().map(|v| scale * v).collect(),
            Payoff::Gmmb { guarantee, scale } => vals[range].iter().map(|v| guarantee.max(scale * v)).collect(),
            Payoff::RunningAverage { scale } => {
                let ints = p.cumulative_integrals();
                range
                    .map(|k| {
                        let t = grid.node(k);
                        if t > 0.0 {
                            scale * ints[k] / t
                        } else {
                            scale * vals[0]
                        }
                    })
                    .collect()
            }
            Payoff::RunningMax { scale } => {
                let mut m = vals[..from].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                range
                    .map(|k| {
                        m = m.max(vals[k]);
                        scale * m
                    })
                    .collect()
            }
            Payoff::Table { times, amounts } => range.map(|k| Self::table_value(times, amounts, grid.node(k))).collect(),
        }
    }

    fn analytic_derivatives(&self, p: &StoppedPath) -> Option<Derivatives> {
        match self {
            Payoff::Constant { .. } => Some(Derivatives::default()),
            Payoff::Endpoint { scale } => Some(Derivatives {
                vertical: *scale,
                ..Derivatives::default()
            }),
            Payoff::RunningAverage { scale } => {
                let t = p.stop_time();
                (t > 0.0).then(|| Derivatives {
                    horizontal: scale * (p.last() - p.path_integral() / t) / t,
                    ..Derivatives::default()
                })
            }
            _ => None,
        }
    }

    fn closed_form(&self, maturity: f64) -> Option<ClosedForm> {
        match self {
            Payoff::Constant { amount } => Some(ClosedForm::Constant { amount: *amount }),
            Payoff::Endpoint { scale } => Some(ClosedForm::Endpoint { scale: *scale }),
            // The average over a degenerate window is the start value.
            Payoff::RunningAverage { scale } if maturity <= 0.0 => Some(ClosedForm::Endpoint { scale: *scale }),
            Payoff::RunningAverage { scale } => Some(ClosedForm::RunningAverage { scale: *scale }),
            Payoff::Table { times, amounts } => Some(ClosedForm::Constant {
                amount: Self::table_value(times, amounts, maturity),
            }),
            _ => None,
        }
    }
}

/// `φ` on the listed dates and zero elsewhere; used for jump payments that
/// differ between contract dates.
pub struct Dated {
    pub dates: Vec<f64>,
    pub inner: Arc<dyn PathFunctional>,
    tol: f64,
}

impl Dated {
    pub fn new(dates: Vec<f64>, inner: Arc<dyn PathFunctional>) -> Self {
        Self {
            dates,
            inner,
            tol: 1e-9,
        }
    }

    fn active(&self, t: f64) -> bool {
        self.dates.iter().any(|d| (d - t).abs() <= self.tol * d.abs().max(1.0))
    }
}

impl PathFunctional for Dated {
    fn eval(&self, p: &StoppedPath) -> f64 {
        if self.active(p.stop_time()) {
            self.inner.eval(p)
        } else {
            0.0
        }
    }

    fn name(&self) -> String {
        format!("{}@dates", self.inner.name())
    }

    fn eval_along(&self, p: &StoppedPath, from: usize) -> Vec<f64> {
        let inner = self.inner.eval_along(p, from);
        inner
            .into_iter()
            .zip(from..)
            .map(|(v, k)| if self.active(p.grid().node(k)) { v } else { 0.0 })
            .collect()
    }

    fn closed_form(&self, maturity: f64) -> Option<ClosedForm> {
        if self.active(maturity) {
            self.inner.closed_form(maturity)
        } else {
            Some(ClosedForm::Constant { amount: 0.0 })
        }
    }
}

/// `factor·φ`.
pub struct Scaled {
    pub factor: f64,
    pub inner: Arc<dyn PathFunctional>,
}

impl PathFunctional for Scaled {
    fn eval(&self, p: &StoppedPath) -> f64 {
        self.factor * self.inner.eval(p)
    }

    fn name(&self) -> String {
        format!("{}*{}", self.factor, self.inner.name())
    }

    fn eval_along(&self, p: &StoppedPath, from: usize) -> Vec<f64> {
        self.inner.eval_along(p, from).into_iter().map(|v| self.factor * v).collect()
    }

    fn analytic_derivatives(&self, p: &StoppedPath) -> Option<Derivatives> {
        self.inner.analytic_derivatives(p).map(|d| Derivatives {
            horizontal: self.factor * d.horizontal,
            vertical: self.factor * d.vertical,
            second_vertical: self.factor * d.second_vertical,
        })
    }

    fn closed_form(&self, maturity: f64) -> Option<ClosedForm> {
        self.inner.closed_form(maturity).map(|c| c.scaled(self.factor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional_calculus::{horizontal_derivative_steps, vertical_derivative};
    use crate::stopped_paths::TimeGrid;

    fn all() -> Vec<Payoff> {
        vec![
            Payoff::Constant { amount: -2.5 },
            Payoff::Endpoint { scale: 2.0 },
            Payoff::RunningAverage { scale: 1.5 },
            Payoff::RunningMax { scale: 1.0 },
            Payoff::Gmmb { guarantee: 1.1, scale: 1.0 },
            Payoff::Table {
                times: vec![0.0, 0.5, 1.0],
                amounts: vec![1.0, 3.0, 2.0],
            },
        ]
    }

    fn path() -> StoppedPath {
        let g = TimeGrid::uniform(1.0, 64).unwrap();
        StoppedPath::from_fn(g, 64, |s| 1.0 + 0.3 * (9.0 * s).sin() + 0.2 * s).unwrap()
    }

    #[test]
    fn eval_along_matches_restopping() {
        let p = path();
        for pay in all() {
            let fast = pay.eval_along(&p, 3);
            for (k, v) in (3..=64).zip(&fast) {
                let slow = pay.eval(&p.stop_at_index(k).unwrap());
                assert!((v - slow).abs() < 1e-13, "{} at {k}", pay.name());
            }
        }
    }

    #[test]
    fn registry_values() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let p = StoppedPath::new(g, vec![1.0, 3.0, 2.0]).unwrap();
        assert_eq!(Payoff::RunningMax { scale: 2.0 }.eval(&p), 6.0);
        assert_eq!(Payoff::Gmmb { guarantee: 2.5, scale: 1.0 }.eval(&p), 2.5);
        assert_eq!(Payoff::Gmmb { guarantee: 1.5, scale: 1.0 }.eval(&p), 2.0);
        assert!((Payoff::RunningAverage { scale: 1.0 }.eval(&p) - 2.25).abs() < 1e-15);
        let tab = Payoff::Table {
            times: vec![0.0, 1.0],
            amounts: vec![0.0, 4.0],
        };
        assert_eq!(tab.eval(&p), 2.0);
        let start = p.stop_at_index(0).unwrap();
        assert_eq!(Payoff::RunningAverage { scale: 3.0 }.eval(&start), 3.0);
    }

    #[test]
    fn analytic_derivatives_agree_with_bumps() {
        let p = path().stop_at_index(40).unwrap();
        for pay in all() {
            if let Some(d) = pay.analytic_derivatives(&p) {
                let v = vertical_derivative(&pay, &p, 1e-4).unwrap().value;
                assert!((v - d.vertical).abs() < 1e-8, "{}", pay.name());
                let h = horizontal_derivative_steps(&pay, &p, 1).unwrap().value;
                assert!((h - d.horizontal).abs() < 0.05, "{}", pay.name());
            }
        }
    }

    #[test]
    fn serde_round_trip_and_validation() {
        for pay in all() {
            pay.validate().unwrap();
            let text = toml::to_string(&pay).unwrap();
            assert_eq!(toml::from_str::<Payoff>(&text).unwrap(), pay);
        }
        let bad: std::result::Result<Payoff, _> = toml::from_str("kind = \"endpoint\"\nscal = 2.0\n");
        assert!(bad.is_err());
        assert!(Payoff::Table {
            times: vec![1.0, 0.5],
            amounts: vec![1.0, 1.0]
        }
        .validate()
        .is_err());
    }

    #[test]
    fn dated_and_scaled_wrappers() {
        let p = path();
        let dated = Dated::new(vec![0.5, 1.0], Payoff::Constant { amount: 2.0 }.into_functional());
        assert_eq!(dated.eval(&p.stop_at_index(32).unwrap()), 2.0);
        assert_eq!(dated.eval(&p.stop_at_index(31).unwrap()), 0.0);
        assert_eq!(dated.closed_form(0.25), Some(ClosedForm::Constant { amount: 0.0 }));
        let along = dated.eval_along(&p, 30);
        assert_eq!((along[1], along[2]), (0.0, 2.0));
        let scaled = Scaled {
            factor: -3.0,
            inner: Payoff::Endpoint { scale: 1.0 }.into_functional(),
        };
        assert_eq!(scaled.eval(&p), -3.0 * p.last());
        assert_eq!(scaled.closed_form(1.0), Some(ClosedForm::Endpoint { scale: -3.0 }));
    }

    #[test]
    fn scaling_is_linear() {
        let p = path();
        for pay in all() {
            if let Some(s) = pay.scaled(-0.5) {
                assert!((s.eval(&p) + 0.5 * pay.eval(&p)).abs() < 1e-15);
            }
        }
    }
}
