//! Sample statistics for Monte Carlo output.

use serde::Serialize;

/// Mean, standard error and excess kurtosis of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std_error: f64,
    pub excess_kurtosis: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std_error: f64::NAN,
                excess_kurtosis: f64::NAN,
                n,
            };
        }
        let nf = n as f64;
        let mean = xs.iter().sum::<f64>() / nf;
        let (m2, m4) = xs.iter().fold((0.0, 0.0), |(a, b), x| {
            let d = (x - mean) * (x - mean);
            (a + d, b + d * d)
        });
        let var = if n > 1 { m2 / (nf - 1.0) } else { 0.0 };
        let excess_kurtosis = if m2 > 0.0 {
            nf * m4 / (m2 * m2) - 3.0
        } else {
            0.0
        };
        Self {
            mean,
            std_error: (var / nf).sqrt(),
            excess_kurtosis,
            n,
        }
    }
}

/// Kurtosis above this flags a heavy-tailed inner batch.
pub const HEAVY_TAIL_KURTOSIS: f64 = 50.0;

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_of_small_sample() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std_error - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert!((s.excess_kurtosis - (4.0 * 10.25 / 25.0 - 3.0)).abs() < 1e-12);
        let c = Summary::of(&[7.0; 5]);
        assert_eq!((c.std_error, c.excess_kurtosis), (0.0, 0.0));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
