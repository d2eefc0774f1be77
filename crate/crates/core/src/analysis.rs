//! Regularity constants of the vector field, the a-priori step-width bound,
//! and integral-gap / state-gap metrics of closed-loop runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::convexification::ControlSet;
use crate::dynamics::OdeModel;
use crate::error::{Error, Result};
use crate::mpc::{ClosedLoopLog, LoopMode};

/// Axis-aligned sampling region.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SampleBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::Precondition("sample box bounds must be ordered and of equal length".into()));
        }
        Ok(SampleBox { lower, upper })
    }

    /// Bounding box of `states`, each side inflated by `inflation` times its
    /// width (at least `inflation` in absolute terms).
    pub fn around(states: &[Vec<f64>], inflation: f64) -> Result<Self> {
        let first = states
            .first()
            .ok_or_else(|| Error::Precondition("no states to bound".into()))?;
        let mut lower = first.clone();
        let mut upper = first.clone();
        for s in states {
            for i in 0..s.len() {
                lower[i] = lower[i].min(s[i]);
                upper[i] = upper[i].max(s[i]);
            }
        }
        for i in 0..lower.len() {
            let pad = inflation * (upper[i] - lower[i]).max(1.0);
            lower[i] -= pad;
            upper[i] += pad;
        }
        SampleBox::new(lower, upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn diameter(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| (u - l) * (u - l))
            .sum::<f64>()
            .sqrt()
    }

    fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| if l == u { l } else { rng.random_range(l..=u) })
            .collect()
    }

    fn clamp(&self, x: &mut [f64]) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }
}

/// Sampled estimates of `L` (Lipschitz constant of `f` in `x`), `M` (bound
/// on `‖f‖`) and `C` (bound on `‖d/dt f‖ = ‖∂f/∂x · f‖`), over all control
/// values, multiplied by the safety factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegularityConstants {
    pub lipschitz: f64,
    pub field_bound: f64,
    pub field_rate: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Estimates the constants from `samples` uniform points in `region`.
///
/// `L` comes from nearby pairs (separation about 10⁻³ of the box diameter),
/// `C` from a central-difference directional derivative along `f`.
pub fn estimate_constants(
    model: &dyn OdeModel,
    ctrl: &ControlSet,
    region: &SampleBox,
    samples: usize,
    seed: u64,
    safety: f64,
) -> Result<RegularityConstants> {
    let n = model.state_dim();
    if region.dim() != n {
        return Err(Error::DimensionMismatch {
            what: "sample box",
            expected: n,
            found: region.dim(),
        });
    }
    if samples < 100 {
        return Err(Error::Precondition(format!("at least 100 samples are needed, got {samples}")));
    }
    if !(safety >= 1.0) {
        return Err(Error::Precondition(format!("safety factor must be at least 1, got {safety}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = 1e-3 * region.diameter().max(1e-9);
    let mut fx = vec![0.0; n];
    let mut fy = vec![0.0; n];
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    let (mut l, mut m, mut c) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..samples {
        let x = region.sample(&mut rng);
        let mut dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let len = norm(&dir).max(1e-300);
        dir.iter_mut().for_each(|d| *d *= radius / len);
        let mut y: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + d).collect();
        region.clamp(&mut y);
        let dist = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        for v in ctrl.values() {
            model.eval(&x, v, &mut fx);
            m = m.max(norm(&fx));
            if dist > 0.0 {
                model.eval(&y, v, &mut fy);
                let diff = fx.iter().zip(&fy).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                l = l.max(diff / dist);
            }
            let fnorm = norm(&fx);
            if fnorm > 0.0 {
                let eps = 1e-6 * x.iter().fold(1.0f64, |a, v| a.max(v.abs())) / fnorm;
                let xp: Vec<f64> = x.iter().zip(&fx).map(|(a, f)| a + eps * f).collect();
                let xm: Vec<f64> = x.iter().zip(&fx).map(|(a, f)| a - eps * f).collect();
                model.eval(&xp, v, &mut fp);
                model.eval(&xm, v, &mut fm);
                let rate = fp.iter().zip(&fm).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / (2.0 * eps);
                c = c.max(rate);
            }
        }
    }
    Ok(RegularityConstants {
        lipschitz: safety * l,
        field_bound: safety * m,
        field_rate: safety * c,
    })
}

/// Largest fine step `δt` for which the SUR state-gap bound stays below
/// `gamma`: `γ / ((M + CΔt) √|Ω| Σ_{j=2}^{|Ω|} 1/j · e^{LΔt})`.
pub fn max_step_width(gamma: f64, constants: &RegularityConstants, coarse_step: f64, cardinality: usize) -> f64 {
    let harmonic: f64 = (2..=cardinality).map(|j| 1.0 / j as f64).sum();
    let denom = (constants.field_bound + constants.field_rate * coarse_step)
        * (cardinality as f64).sqrt()
        * harmonic
        * (constants.lipschitz * coarse_step).exp();
    gamma / denom
}

/// Summary metrics of one rounded run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapMetrics {
    pub sigma_max: f64,
    pub gamma_max: f64,
    /// `100 · Σ t_round / Σ t_solve` with per-step minimum times.
    pub t_r_percent: f64,
}

pub fn gap_metrics(log: &ClosedLoopLog) -> Result<GapMetrics> {
    if log.mode == LoopMode::Relaxed {
        return Err(Error::Precondition("gap metrics need a rounded run".into()));
    }
    let solve: f64 = log.records.iter().map(|r| r.solve_time.as_secs_f64()).sum();
    let round: f64 = log.records.iter().map(|r| r.round_time.as_secs_f64()).sum();
    Ok(GapMetrics {
        sigma_max: log.sigma_max(),
        gamma_max: log.gamma_max(),
        t_r_percent: if solve > 0.0 { 100.0 * round / solve } else { 0.0 },
    })
}

/// Whether the `V_N` trace stays within `level`.
pub fn stays_in_sublevel(log: &ClosedLoopLog, level: f64) -> bool {
    log.value_trace().iter().all(|&v| v <= level)
}

/// Largest `γ_max` among rounded runs whose `V_N` trace stays below the
/// initial value of the run. `None` if no run qualifies.
pub fn empirical_margin<'a>(logs: impl IntoIterator<Item = &'a ClosedLoopLog>) -> Option<f64> {
    logs.into_iter()
        .filter(|log| matches!(log.mode, LoopMode::Rounded { .. }))
        .filter(|log| {
            log.records
                .first()
                .is_some_and(|first| stays_in_sublevel(log, first.value))
        })
        .map(ClosedLoopLog::gamma_max)
        .reduce(f64::max)
}

/// Report written by the `bounds` subcommand.
#[derive(Debug, Clone, Serialize)]
pub struct BoundsReport {
    pub constants: RegularityConstants,
    pub sample_box: SampleBox,
    pub samples: usize,
    pub seed: u64,
    pub gamma: f64,
    /// Whether `gamma` came from the closed-loop sweep.
    pub gamma_is_empirical: bool,
    pub coarse_step: f64,
    pub cardinality: usize,
    pub dt_max: f64,
    /// Smallest integer divisor `N_os` with `Δt / N_os ≤ δt_max`.
    pub min_divisor: u64,
}

impl BoundsReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        constants: RegularityConstants,
        sample_box: SampleBox,
        samples: usize,
        seed: u64,
        gamma: f64,
        gamma_is_empirical: bool,
        coarse_step: f64,
        cardinality: usize,
    ) -> Self {
        let dt_max = max_step_width(gamma, &constants, coarse_step, cardinality);
        let min_divisor = (coarse_step / dt_max).ceil().max(1.0) as u64;
        BoundsReport {
            constants,
            sample_box,
            samples,
            seed,
            gamma,
            gamma_is_empirical,
            coarse_step,
            cardinality,
            dt_max,
            min_divisor,
        }
    }
}
