//! Noise-level schedules and weight-based timestep allocation.
//!
//! A noise schedule assigns interpolation coefficients (alpha_t, sigma_t) to
//! every point of a discrete time grid, with boundary conditions
//! (alpha_0, sigma_0) = (1, 0) and (alpha_1, sigma_1) = (0, 1). Two
//! instantiations are provided:
//!
//! - `Linear`: alpha_t = 1 - t, sigma_t = t.
//! - `TrigVp`: alpha_t = cos(pi t / 2), sigma_t = sin(pi t / 2), a
//!   variance-preserving curve with alpha^2 + sigma^2 = 1.
//!
//! Guidance timesteps are allocated by assigning a weight w_i to each of the
//! M grid positions and converting cumulative weight fractions into integer
//! decrements:
//!
//! ```text
//! C_i = floor((T_start - 1) * sum_{j<=i} w_j / sum_j w_j),   C_0 = 0
//! Delta_i = C_i - C_{i-1}
//! t_k = T_start - sum_{j=k+1}^{M} Delta_j
//! ```
//!
//! The cumulative form telescopes, so `sum Delta_i = T_start - 1` holds in
//! exact integer arithmetic for every weight vector.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Interpolation coefficients at one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulePoint {
    pub alpha: f64,
    pub sigma: f64,
}

impl SchedulePoint {
    pub fn new(alpha: f64, sigma: f64) -> Self {
        Self { alpha, sigma }
    }

    /// Squared signal-to-noise ratio (alpha/sigma)^2.
    pub fn snr(&self) -> f64 {
        (self.alpha / self.sigma).powi(2)
    }
}

/// Functional form of the (alpha_t, sigma_t) curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScheduleKind {
    /// alpha = 1 - t, sigma = t.
    Linear,
    /// alpha = cos(pi t / 2), sigma = sin(pi t / 2).
    TrigVp,
}

/// Discrete noise schedule on `0..=t_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: NoiseScheduleKind,
    pub t_max: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            kind: NoiseScheduleKind::Linear,
            t_max: 1000,
        }
    }
}

impl NoiseSchedule {
    pub fn new(kind: NoiseScheduleKind, t_max: usize) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Parameter("t_max must be positive".into()));
        }
        Ok(Self { kind, t_max })
    }

    /// Evaluate (alpha, sigma) at integer index `t_index`, where the
    /// continuous time is `t = t_index / t_max`.
    ///
    /// The endpoints are pinned exactly to (1, 0) and (0, 1) so boundary
    /// invariants hold without floating-point slack.
    pub fn eval(&self, t_index: usize) -> Result<SchedulePoint> {
        if t_index > self.t_max {
            return Err(Error::IndexOutOfRange {
                index: t_index,
                t_max: self.t_max,
            });
        }
        if t_index == 0 {
            return Ok(SchedulePoint::new(1.0, 0.0));
        }
        if t_index == self.t_max {
            return Ok(SchedulePoint::new(0.0, 1.0));
        }
        let t = t_index as f64 / self.t_max as f64;
        let point = match self.kind {
            NoiseScheduleKind::Linear => SchedulePoint::new(1.0 - t, t),
            NoiseScheduleKind::TrigVp => {
                let half_pi_t = std::f64::consts::FRAC_PI_2 * t;
                SchedulePoint::new(half_pi_t.cos(), half_pi_t.sin())
            }
        };
        Ok(point)
    }

    /// Map a continuous time in [0, 1] to the nearest grid index.
    pub fn index_of(&self, t: f64) -> usize {
        (t * self.t_max as f64).round() as usize
    }
}

/// Weight function selecting where guidance timesteps concentrate.
///
/// Weights are evaluated at positions i = 1..=M. Higher weight at position i
/// allocates a larger decrement to that region of the trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum ScheduleStrategy {
    /// w_i = 1.
    Uniform,
    /// w_i = i + 1.
    Linear,
    /// w_i = (i + 1)^p, p > 1.
    Polynomial { p: f64 },
    /// w_i = k^i, k > 1.
    Exponential { k: f64 },
    /// w_i = exp(-((i/M - mu)^2) / (2 sigma^2)).
    Gaussian { mu: f64, sigma: f64 },
    /// w_i = 1 / BetaPdf((i - 1/2) / M; a, b).
    ///
    /// The density is evaluated at midpoints so shapes with a, b < 1 or > 1
    /// stay finite and positive at both ends of the grid.
    Beta { a: f64, b: f64 },
}

impl ScheduleStrategy {
    fn validate(&self) -> Result<()> {
        match *self {
            ScheduleStrategy::Uniform | ScheduleStrategy::Linear => Ok(()),
            ScheduleStrategy::Polynomial { p } => {
                if p > 1.0 && p.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Parameter(format!("polynomial power p = {p}, need p > 1")))
                }
            }
            ScheduleStrategy::Exponential { k } => {
                if k > 1.0 && k.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Parameter(format!("exponential rate k = {k}, need k > 1")))
                }
            }
            ScheduleStrategy::Gaussian { mu, sigma } => {
                if !(0.0..=1.0).contains(&mu) {
                    return Err(Error::Parameter(format!("gaussian mu = {mu}, need mu in [0, 1]")));
                }
                if sigma > 0.0 && sigma.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Parameter(format!("gaussian sigma = {sigma}, need sigma > 0")))
                }
            }
            ScheduleStrategy::Beta { a, b } => {
                if a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Parameter(format!("beta shapes a = {a}, b = {b}, need both > 0")))
                }
            }
        }
    }
}

/// Evaluate the weight vector w_1..w_M for a strategy.
pub fn schedule_weights(strategy: ScheduleStrategy, m: usize) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::Parameter("M must be at least 1".into()));
    }
    strategy.validate()?;
    let weights: Vec<f64> = (1..=m)
        .map(|i| match strategy {
            ScheduleStrategy::Uniform => 1.0,
            ScheduleStrategy::Linear => (i + 1) as f64,
            ScheduleStrategy::Polynomial { p } => ((i + 1) as f64).powf(p),
            ScheduleStrategy::Exponential { k } => k.powi(i as i32),
            ScheduleStrategy::Gaussian { mu, sigma } => {
                let x = i as f64 / m as f64;
                (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp()
            }
            ScheduleStrategy::Beta { a, b } => {
                let x = (i as f64 - 0.5) / m as f64;
                1.0 / beta_pdf(x, a, b)
            }
        })
        .collect();
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::Parameter(format!(
            "strategy {strategy:?} produced non-positive weight {w}"
        )));
    }
    Ok(weights)
}

fn beta_pdf(x: f64, a: f64, b: f64) -> f64 {
    let ln_b = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    ((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_b).exp()
}

/// Increasing guidance timesteps t_1 < ... < t_M = T_start with their
/// decrements Delta_1..Delta_M.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepGrid {
    steps: Vec<usize>,
    deltas: Vec<usize>,
    t_start: usize,
}

impl TimestepGrid {
    /// Guidance timesteps in increasing order; the last entry is `T_start`.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn deltas(&self) -> &[usize] {
        &self.deltas
    }

    pub fn t_start(&self) -> usize {
        self.t_start
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Allocate M timesteps from positive weights.
///
/// Errors with the offending index when flooring collapses two consecutive
/// steps; the grid is never silently merged.
pub fn allocate_grid(weights: &[f64], t_start: usize) -> Result<TimestepGrid> {
    let m = weights.len();
    if m == 0 {
        return Err(Error::Parameter("weight vector is empty".into()));
    }
    if t_start < m + 1 {
        return Err(Error::Parameter(format!(
            "T_start = {t_start} must be at least M + 1 = {}",
            m + 1
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::Parameter(format!("weights must be positive, got {w}")));
    }

    let total: f64 = weights.iter().sum();
    let span = (t_start - 1) as f64;
    let mut cumulative = Vec::with_capacity(m);
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        // The nudge keeps floor() exact when the cumulative fraction lands
        // on an integer up to rounding (e.g. uniform weights with
        // span % M == 0).
        cumulative.push((span * (acc / total) + 1e-9).floor() as usize);
    }
    // Guard against rounding in the final cumulative fraction.
    cumulative[m - 1] = t_start - 1;

    let mut deltas = Vec::with_capacity(m);
    let mut prev = 0;
    for &c in &cumulative {
        deltas.push(c.saturating_sub(prev));
        prev = c;
    }

    // t_k = T_start - sum_{j > k} Delta_j; consecutive steps differ by
    // Delta_{k+1}, so any zero decrement past the first collapses the grid.
    if let Some(idx) = deltas.iter().skip(1).position(|&d| d == 0) {
        return Err(Error::Allocation {
            index: idx + 2,
            t_start,
            m,
        });
    }

    let mut steps = vec![0usize; m];
    let mut suffix = 0usize;
    for k in (0..m).rev() {
        steps[k] = t_start - suffix;
        suffix += deltas[k];
    }

    Ok(TimestepGrid {
        steps,
        deltas,
        t_start,
    })
}

/// Convenience: weights for `strategy` then allocation against `t_start`.
pub fn build_grid(strategy: ScheduleStrategy, m: usize, t_start: usize) -> Result<TimestepGrid> {
    let weights = schedule_weights(strategy, m)?;
    allocate_grid(&weights, t_start)
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn strategy_strategy() -> impl Strategy<Value = ScheduleStrategy> {
        prop_oneof![
            Just(ScheduleStrategy::Uniform),
            Just(ScheduleStrategy::Linear),
            (1.01f64..4.0).prop_map(|p| ScheduleStrategy::Polynomial { p }),
            (1.01f64..1.5).prop_map(|k| ScheduleStrategy::Exponential { k }),
            ((0.0f64..=1.0), (0.05f64..20.0))
                .prop_map(|(mu, sigma)| ScheduleStrategy::Gaussian { mu, sigma }),
            ((0.2f64..5.0), (0.2f64..5.0)).prop_map(|(a, b)| ScheduleStrategy::Beta { a, b }),
        ]
    }

    proptest! {
        /// Telescoping and strict monotonicity hold whenever allocation
        /// succeeds; failures must be the documented degenerate case.
        #[test]
        fn grid_invariants(strategy in strategy_strategy(), m in 1usize..40, extra in 0usize..1000) {
            let t_start = m + 1 + extra;
            let t_start = t_start.min(1000).max(m + 1);
            let weights = schedule_weights(strategy, m).unwrap();
            match allocate_grid(&weights, t_start) {
                Ok(grid) => {
                    prop_assert_eq!(grid.deltas().iter().sum::<usize>(), t_start - 1);
                    prop_assert!(grid.steps().windows(2).all(|w| w[0] < w[1]));
                    prop_assert!(grid.steps()[0] >= 1);
                    prop_assert_eq!(*grid.steps().last().unwrap(), t_start);
                }
                Err(Error::Allocation { index, .. }) => {
                    prop_assert!(index >= 2 && index <= m);
                }
                Err(other) => return Err(TestCaseError::fail(format!("unexpected error {other:?}"))),
            }
        }

        /// Uniform allocation spreads decrements within one unit of each other.
        #[test]
        fn uniform_deltas_balanced(m in 1usize..40, extra in 40usize..1000) {
            let t_start = m + 1 + extra;
            let grid = build_grid(ScheduleStrategy::Uniform, m, t_start).unwrap();
            let min = grid.deltas().iter().min().unwrap();
            let max = grid.deltas().iter().max().unwrap();
            prop_assert!(max - min <= 1);
        }
    }
}
