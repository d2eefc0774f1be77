//! Simple rounding (SR) and sum-up rounding (SUR) of a relaxed multiplier
//! onto binary multipliers on the oversampling grid, with the integral-gap
//! metric and its a-priori bounds.

use serde::{Deserialize, Serialize};

use crate::convexification::{argmax, SimplexVector};

/// Rounding scheme applied to the first relaxed multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundingMethod {
    /// Repeat `argmax(u)` on every fine interval.
    Sr,
    /// Activate the index with the largest accumulated deficit.
    Sur,
}

impl RoundingMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            RoundingMethod::Sr => "sr",
            RoundingMethod::Sur => "sur",
        }
    }
}

impl std::fmt::Display for RoundingMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RoundingMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sr" => Ok(RoundingMethod::Sr),
            "sur" => Ok(RoundingMethod::Sur),
            other => Err(format!("unknown rounding method `{other}` (expected `sr` or `sur`)")),
        }
    }
}

/// Binary sequence on one coarse interval and its integral gap.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundingResult {
    pub method: RoundingMethod,
    pub omega: Vec<SimplexVector>,
    /// Integral gap of `omega` against the relaxed multiplier.
    pub sigma: f64,
}

impl RoundingResult {
    /// Index of the active control on each fine interval.
    pub fn active_indices(&self) -> Vec<usize> {
        self.omega.iter().map(SimplexVector::argmax).collect()
    }
}

/// Running sum with Kahan compensation.
#[derive(Debug, Clone, Copy, Default)]
struct Compensated {
    sum: f64,
    carry: f64,
}

impl Compensated {
    fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }
}

/// SR: the binary multiplier of `argmax(u)` (lowest index on ties) on all
/// `n_os` fine intervals of length `fine_step`.
pub fn simple_rounding(u: &SimplexVector, n_os: usize, fine_step: f64) -> RoundingResult {
    let omega = vec![SimplexVector::unit(u.len(), u.argmax()); n_os];
    let sigma = integral_gap(u, &omega, fine_step);
    RoundingResult {
        method: RoundingMethod::Sr,
        omega,
        sigma,
    }
}

/// SUR with the deficit reset at the start of the interval.
pub fn sum_up_rounding(u: &SimplexVector, n_os: usize, fine_step: f64) -> RoundingResult {
    let mut deficit = vec![0.0; u.len()];
    sum_up_rounding_with_carry(u, n_os, fine_step, &mut deficit)
}

/// SUR starting from `deficit` and leaving the final deficit in it, so the
/// rounding error can be carried across coarse intervals.
///
/// # Panics
///
/// If `deficit.len() != u.len()`.
pub fn sum_up_rounding_with_carry(u: &SimplexVector, n_os: usize, fine_step: f64, deficit: &mut [f64]) -> RoundingResult {
    assert_eq!(deficit.len(), u.len(), "deficit length");
    let mut acc: Vec<Compensated> = deficit.iter().map(|&d| Compensated { sum: d, carry: 0.0 }).collect();
    let mut sums = vec![0.0; u.len()];
    let mut omega = Vec::with_capacity(n_os);
    for _ in 0..n_os {
        for (a, &ui) in acc.iter_mut().zip(u.weights()) {
            a.add(fine_step * ui);
        }
        for (s, a) in sums.iter_mut().zip(&acc) {
            *s = a.sum;
        }
        let j = argmax(&sums);
        acc[j].add(-fine_step);
        omega.push(SimplexVector::unit(u.len(), j));
    }
    for (d, a) in deficit.iter_mut().zip(&acc) {
        *d = a.sum;
    }
    let sigma = integral_gap(u, &omega, fine_step);
    RoundingResult {
        method: RoundingMethod::Sur,
        omega,
        sigma,
    }
}

/// Dispatches on `method` with the deficit reset.
pub fn round(method: RoundingMethod, u: &SimplexVector, n_os: usize, fine_step: f64) -> RoundingResult {
    match method {
        RoundingMethod::Sr => simple_rounding(u, n_os, fine_step),
        RoundingMethod::Sur => sum_up_rounding(u, n_os, fine_step),
    }
}

/// `max_m ‖Σ_{j<m} δt (u − ω_j)‖₂` over the grid points `m = 0 … n_os`.
pub fn integral_gap(u: &SimplexVector, omega: &[SimplexVector], fine_step: f64) -> f64 {
    let mut acc = vec![Compensated::default(); u.len()];
    let mut worst: f64 = 0.0;
    for w in omega {
        let mut norm = 0.0;
        for (i, a) in acc.iter_mut().enumerate() {
            a.add(fine_step * (u.weights()[i] - w.weights()[i]));
            norm += a.sum * a.sum;
        }
        worst = worst.max(norm.sqrt());
    }
    worst
}

/// A-priori integral-gap bounds for SR and SUR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundingBounds {
    pub sigma_sr: f64,
    pub sigma_sur: f64,
}

/// `σ^SR = N_os √|Ω| δt (1 − 1/|Ω|)` and
/// `σ^SUR = √|Ω| δt Σ_{i=2}^{min(|Ω|, N_os+1)} 1/i`.
pub fn theoretical_bounds(cardinality: usize, fine_step: f64, n_os: usize) -> RoundingBounds {
    let card = cardinality as f64;
    let top = cardinality.min(n_os + 1);
    let harmonic: f64 = (2..=top).map(|i| 1.0 / i as f64).sum();
    RoundingBounds {
        sigma_sr: n_os as f64 * card.sqrt() * fine_step * (1.0 - 1.0 / card),
        sigma_sur: card.sqrt() * fine_step * harmonic,
    }
}

/// `(M + CΔt) σ e^{LΔt}`: bound on the state deviation after one coarse step
/// caused by an integral gap `sigma`.
pub fn state_error_bound(m: f64, c: f64, l: f64, coarse_step: f64, sigma: f64) -> f64 {
    (m + c * coarse_step) * sigma * (l * coarse_step).exp()
}
