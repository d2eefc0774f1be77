//! Relaxed OCP solver.
//!
//! Single shooting over the multipliers `u₀ … u_{N−1}`: the only constraints
//! left after eliminating the states are the per-stage simplices, handled by
//! projection, and the terminal inequality `V_f(x_N) ≤ π`, handled by an
//! augmented Lagrangian. Each augmented subproblem is minimized by projected
//! gradient with Barzilai–Borwein (second form) trial steps and Armijo backtracking along
//! the projection arc. Gradients come from the discrete adjoint of the
//! midpoint scheme, so they are exact up to rounding.

use std::sync::Once;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::convexification::{project_simplex_in_place, quadratic_form, SimplexVector};
use crate::error::{check_dim, Error, Result};
use crate::ocp::{OcpProblem, OcpSolution, SolveDiagnostics};

/// Solver tolerances and budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Bound on `‖u − Π(u − ∇L)‖∞`.
    pub stationarity_tol: f64,
    /// Bound on `max(0, V_f(x_N) − π)`.
    pub constraint_tol: f64,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub armijo_c: f64,
    pub armijo_shrink: f64,
    /// Compare the adjoint gradient with finite differences on the first solve.
    pub fd_check: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            max_outer: 20,
            max_inner: 500,
            stationarity_tol: 1e-6,
            constraint_tol: 1e-8,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            armijo_c: 1e-4,
            armijo_shrink: 0.5,
            fd_check: false,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("solver.stationarity_tol", self.stationarity_tol),
            ("solver.constraint_tol", self.constraint_tol),
            ("solver.penalty_init", self.penalty_init),
            ("solver.armijo_c", self.armijo_c),
        ];
        for (path, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(path, "must be positive"));
            }
        }
        if self.max_outer == 0 {
            return Err(Error::config("solver.max_outer", "must be at least 1"));
        }
        if self.max_inner == 0 {
            return Err(Error::config("solver.max_inner", "must be at least 1"));
        }
        if !(self.penalty_growth >= 1.0) {
            return Err(Error::config("solver.penalty_growth", "must be at least 1"));
        }
        if !(self.armijo_c < 1.0) {
            return Err(Error::config("solver.armijo_c", "must be below 1"));
        }
        if !(self.armijo_shrink > 0.0 && self.armijo_shrink < 1.0) {
            return Err(Error::config("solver.armijo_shrink", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Initial guess for [`solve_ocp`].
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub multipliers: Vec<SimplexVector>,
    /// Terminal-constraint multiplier from the previous solve.
    pub dual: f64,
}

const MAX_PENALTY: f64 = 1e8;

/// Augmented-Lagrangian weights for the terminal inequality.
#[derive(Debug, Clone, Copy)]
struct Penalty {
    dual: f64,
    mu: f64,
}

impl Penalty {
    const NONE: Penalty = Penalty { dual: 0.0, mu: 0.0 };

    /// `ψ(g) = (max(0, λ + μg)² − λ²) / 2μ`
    fn value(&self, g: f64) -> f64 {
        if self.mu == 0.0 {
            return 0.0;
        }
        let t = (self.dual + self.mu * g).max(0.0);
        (t * t - self.dual * self.dual) / (2.0 * self.mu)
    }

    fn slope(&self, g: f64) -> f64 {
        if self.mu == 0.0 {
            return 0.0;
        }
        (self.dual + self.mu * g).max(0.0)
    }
}

/// Rollout storage and adjoint sweep over flattened raw multipliers
/// (`u[k·|Ω| + i]`).
struct Evaluator<'a> {
    problem: &'a OcpProblem,
    x0: &'a [f64],
    n: usize,
    m: usize,
    horizon: usize,
    substeps: usize,
    h: f64,
    /// `x_k`, `k = 0 … N`.
    stages: Vec<f64>,
    /// State before each substep.
    subs: Vec<f64>,
    /// Midpoint of each substep.
    mids: Vec<f64>,
    /// `f(x, vⁱ)` for every control value at each substep start.
    sub_fields: Vec<f64>,
    /// `f(x, vⁱ)` for every control value at each midpoint.
    mid_fields: Vec<f64>,
    jac: Vec<f64>,
    adj_a: Vec<f64>,
    adj_t: Vec<f64>,
}

struct Evaluation {
    /// `J_N`
    cost: f64,
    /// `V_f(x_N) − π`
    constraint: f64,
    /// `J_N + ψ(g)`
    merit: f64,
}

impl<'a> Evaluator<'a> {
    fn new(problem: &'a OcpProblem, x0: &'a [f64]) -> Self {
        let n = problem.state_dim();
        let m = problem.cardinality();
        let horizon = problem.horizon();
        let substeps = problem.grid.substeps_per_coarse();
        Evaluator {
            problem,
            x0,
            n,
            m,
            horizon,
            substeps,
            h: problem.grid.substep_len(),
            stages: vec![0.0; (horizon + 1) * n],
            subs: vec![0.0; horizon * substeps * n],
            mids: vec![0.0; horizon * substeps * n],
            sub_fields: vec![0.0; horizon * substeps * m * n],
            mid_fields: vec![0.0; horizon * substeps * m * n],
            jac: vec![0.0; n * n],
            adj_a: vec![0.0; n],
            adj_t: vec![0.0; n],
        }
    }

    fn len(&self) -> usize {
        self.horizon * self.m
    }

    fn terminal_state(&self) -> &[f64] {
        &self.stages[self.horizon * self.n..]
    }

    fn rollout(&mut self, u: &[f64], penalty: Penalty) -> Result<Evaluation> {
        let (n, h) = (self.n, self.h);
        let mut x = self.x0.to_vec();
        let mut k1 = vec![0.0; n];
        let mut xm = vec![0.0; n];
        let mut cost = 0.0;
        for k in 0..self.horizon {
            let uk = &u[k * self.m..(k + 1) * self.m];
            self.stages[k * n..(k + 1) * n].copy_from_slice(&x);
            cost += quadratic_form(&self.problem.state_weight, &x)
                + self.problem.cost.input_cost(self.problem.controls.cost_row(), uk);
            for s in 0..self.substeps {
                let idx = (k * self.substeps + s) * n;
                let fidx = idx * self.m;
                let fields = &mut self.sub_fields[fidx..fidx + self.m * n];
                self.subs[idx..idx + n].copy_from_slice(&x);
                eval_controls(self.problem, &x, fields);
                combine(uk, fields, &mut k1);
                for i in 0..n {
                    xm[i] = x[i] + 0.5 * h * k1[i];
                }
                let fields = &mut self.mid_fields[fidx..fidx + self.m * n];
                self.mids[idx..idx + n].copy_from_slice(&xm);
                eval_controls(self.problem, &xm, fields);
                combine(uk, fields, &mut k1);
                for i in 0..n {
                    x[i] += h * k1[i];
                }
                if !x.iter().all(|v| v.is_finite()) {
                    return Err(Error::IntegrationOverflow {
                        substep: k * self.substeps + s,
                    });
                }
            }
        }
        self.stages[self.horizon * n..].copy_from_slice(&x);
        let vf = self.problem.terminal.value(&x);
        cost += vf;
        let constraint = vf - self.problem.terminal.level;
        Ok(Evaluation {
            cost,
            constraint,
            merit: cost + penalty.value(constraint),
        })
    }

    /// `out += uᵢ · J(x, vⁱ)ᵀ w` summed over `i`.
    fn add_field_jacobian_transpose(&mut self, x: &[f64], u: &[f64], w: &[f64], out: &mut [f64]) {
        let n = self.n;
        for (i, &ui) in u.iter().enumerate() {
            if ui == 0.0 {
                continue;
            }
            self.problem.model.state_jacobian(x, self.problem.controls.value(i), &mut self.jac);
            for c in 0..n {
                let mut acc = 0.0;
                for r in 0..n {
                    acc += self.jac[r * n + c] * w[r];
                }
                out[c] += ui * acc;
            }
        }
    }

    /// Gradient of the merit at the last rollout.
    fn gradient(&mut self, u: &[f64], penalty: Penalty, constraint: f64, grad: &mut [f64]) {
        let (n, m, h) = (self.n, self.m, self.h);
        grad.fill(0.0);
        // λ_N = (1 + ψ'(g)) (P + Pᵀ) x_N
        let p = &self.problem.terminal.p;
        let scale = 1.0 + penalty.slope(constraint);
        let x_n = self.terminal_state().to_vec();
        let mut lam: Vec<f64> = (0..n)
            .map(|i| scale * (0..n).map(|j| (p[(i, j)] + p[(j, i)]) * x_n[j]).sum::<f64>())
            .collect();
        let mut x = vec![0.0; n];
        let mut xm = vec![0.0; n];
        let mut a = std::mem::take(&mut self.adj_a);
        let mut t = std::mem::take(&mut self.adj_t);
        for k in (0..self.horizon).rev() {
            let uk = &u[k * m..(k + 1) * m];
            let gk = &mut grad[k * m..(k + 1) * m];
            for s in (0..self.substeps).rev() {
                let idx = (k * self.substeps + s) * n;
                x.copy_from_slice(&self.subs[idx..idx + n]);
                xm.copy_from_slice(&self.mids[idx..idx + n]);
                // a = h G(xm)ᵀ λ⁺
                a.fill(0.0);
                self.add_field_jacobian_transpose(&xm, uk, &lam, &mut a);
                a.iter_mut().for_each(|v| *v *= h);
                let fidx = idx * m;
                for (i, g) in gk.iter_mut().enumerate() {
                    let at = fidx + i * n..fidx + (i + 1) * n;
                    let fm = &self.mid_fields[at.clone()];
                    let fx = &self.sub_fields[at];
                    let mut acc = h * fm.iter().zip(&lam).map(|(fi, li)| fi * li).sum::<f64>();
                    acc += 0.5 * h * fx.iter().zip(&a).map(|(fi, ai)| fi * ai).sum::<f64>();
                    *g += acc;
                }
                // λ = λ⁺ + a + (h/2) G(x)ᵀ a
                t.fill(0.0);
                self.add_field_jacobian_transpose(&x, uk, &a, &mut t);
                for i in 0..n {
                    lam[i] += a[i] + 0.5 * h * t[i];
                }
            }
            let xk = &self.stages[k * n..(k + 1) * n];
            let q = &self.problem.state_weight;
            for i in 0..n {
                lam[i] += (0..n).map(|j| (q[(i, j)] + q[(j, i)]) * xk[j]).sum::<f64>();
            }
            self.problem
                .cost
                .add_input_cost_gradient(self.problem.controls.cost_row(), uk, gk);
        }
        self.adj_a = a;
        self.adj_t = t;
    }
}

/// `f(x, vⁱ)` for every control value, stacked.
fn eval_controls(problem: &OcpProblem, x: &[f64], out: &mut [f64]) {
    for (i, chunk) in out.chunks_mut(x.len()).enumerate() {
        problem.model.eval(x, problem.controls.value(i), chunk);
    }
}

/// `Σ uᵢ fᵢ` over the nonzero weights, in index order.
fn combine(u: &[f64], fields: &[f64], out: &mut [f64]) {
    let n = out.len();
    out.fill(0.0);
    for (i, &ui) in u.iter().enumerate() {
        if ui == 0.0 {
            continue;
        }
        for (o, f) in out.iter_mut().zip(&fields[i * n..(i + 1) * n]) {
            *o += ui * f;
        }
    }
}

fn project_blocks(u: &mut [f64], m: usize) {
    for block in u.chunks_mut(m) {
        project_simplex_in_place(block);
    }
}

/// `‖u − Π(u − ∇)‖∞`
fn stationarity(u: &[f64], grad: &[f64], m: usize, buf: &mut [f64]) -> f64 {
    for i in 0..u.len() {
        buf[i] = u[i] - grad[i];
    }
    project_blocks(buf, m);
    u.iter().zip(buf.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

struct InnerOutcome {
    iterations: usize,
    stationarity: f64,
    eval: Evaluation,
    step: f64,
}

/// Projected gradient with BB steps and Armijo backtracking on the merit.
fn minimize_merit(
    ev: &mut Evaluator<'_>,
    u: &mut Vec<f64>,
    penalty: Penalty,
    settings: &SolverSettings,
    mut step: f64,
) -> Result<InnerOutcome> {
    let len = ev.len();
    let m = ev.m;
    let mut eval = ev.rollout(u, penalty)?;
    let mut grad = vec![0.0; len];
    ev.gradient(u, penalty, eval.constraint, &mut grad);
    let mut trial = vec![0.0; len];
    let mut trial_grad = vec![0.0; len];
    let mut buf = vec![0.0; len];
    let mut res = stationarity(u, &grad, m, &mut buf);
    let mut iterations = 0;
    while iterations < settings.max_inner && res > settings.stationarity_tol {
        iterations += 1;
        let mut accepted = None;
        while step > 1e-14 {
            for i in 0..len {
                trial[i] = u[i] - step * grad[i];
            }
            project_blocks(&mut trial, m);
            let slope: f64 = (0..len).map(|i| grad[i] * (trial[i] - u[i])).sum();
            match ev.rollout(&trial, penalty) {
                Ok(e) if e.merit <= eval.merit + settings.armijo_c * slope => {
                    accepted = Some(e);
                    break;
                }
                // A blown-up trial is just a rejected step.
                Ok(_) | Err(Error::IntegrationOverflow { .. }) => step *= settings.armijo_shrink,
                Err(e) => return Err(e),
            }
        }
        let Some(next) = accepted else {
            // Line search stalled at rounding level; leave the point as is.
            ev.rollout(u, penalty)?;
            break;
        };
        ev.gradient(&trial, penalty, next.constraint, &mut trial_grad);
        let mut sy = 0.0;
        let mut yy = 0.0;
        for i in 0..len {
            let y = trial_grad[i] - grad[i];
            sy += (trial[i] - u[i]) * y;
            yy += y * y;
        }
        step = if sy > 0.0 { (sy / yy).clamp(1e-10, 1e10) } else { 1e3 };
        std::mem::swap(u, &mut trial);
        std::mem::swap(&mut grad, &mut trial_grad);
        eval = next;
        res = stationarity(u, &grad, m, &mut buf);
    }
    Ok(InnerOutcome {
        iterations,
        stationarity: res,
        eval,
        step,
    })
}

fn unflatten(u: &[f64], m: usize) -> Vec<SimplexVector> {
    u.chunks(m)
        .map(|c| SimplexVector::new(c.to_vec()).expect("iterates stay on the simplex"))
        .collect()
}

fn flatten(seq: &[SimplexVector]) -> Vec<f64> {
    seq.iter().flat_map(|u| u.weights().iter().copied()).collect()
}

static FD_CHECK: Once = Once::new();

/// Minimizes `J_N(x₀, ·)` over simplex-valued sequences subject to
/// `V_f(x_N) ≤ π`.
///
/// Returns [`Error::SolverInfeasible`] if the terminal violation stays above
/// `constraint_tol` after the outer budget.
pub fn solve_ocp(
    problem: &OcpProblem,
    x0: &[f64],
    warm: Option<&WarmStart>,
    settings: &SolverSettings,
) -> Result<OcpSolution> {
    let started = Instant::now();
    check_dim("initial state", problem.state_dim(), x0.len())?;
    let m = problem.cardinality();
    let mut u = match warm {
        Some(w) => {
            check_dim("warm start", problem.horizon(), w.multipliers.len())?;
            for mu in &w.multipliers {
                check_dim("warm-start multiplier", m, mu.len())?;
            }
            flatten(&w.multipliers)
        }
        None => flatten(&problem.reference_sequence()),
    };
    if settings.fd_check {
        FD_CHECK.call_once(|| match gradient_check(problem, x0, 1, 0) {
            Ok(err) if err <= 1e-5 => log::debug!("adjoint gradient check: max relative error {err:e}"),
            Ok(err) => log::warn!("adjoint gradient check: max relative error {err:e} exceeds 1e-5"),
            Err(e) => log::warn!("adjoint gradient check failed: {e}"),
        });
    }

    let mut ev = Evaluator::new(problem, x0);
    let warm_eval = ev.rollout(&u, Penalty::NONE)?;
    let warm_u = u.clone();

    let mut penalty = Penalty {
        dual: warm.map_or(0.0, |w| w.dual.max(0.0)),
        mu: settings.penalty_init,
    };
    let mut diagnostics = SolveDiagnostics::default();
    let mut step = 1.0;
    let mut last = None;
    // Latest round-end iterate that satisfies the terminal constraint.
    let mut feasible: Option<(Vec<f64>, f64, f64)> = None;
    let mut prev_kkt = f64::INFINITY;
    for round in 0..settings.max_outer {
        let inner = minimize_merit(&mut ev, &mut u, penalty, settings, step)?;
        step = inner.step;
        diagnostics.iterations += inner.iterations;
        diagnostics.outer_rounds = round + 1;
        let g = inner.eval.constraint;
        let violation = g.max(0.0);
        let updated = penalty.slope(g);
        // The constraint value is only as accurate as the inner stationarity.
        let complementarity = updated.min(-g).max(0.0);
        let done = violation <= settings.constraint_tol
            && complementarity <= settings.stationarity_tol
            && inner.stationarity <= settings.stationarity_tol;
        if violation <= settings.constraint_tol {
            feasible = Some((u.clone(), inner.stationarity, updated));
        }
        penalty.dual = updated;
        let kkt = violation.max(complementarity);
        if kkt > 0.25 * prev_kkt {
            penalty.mu = (penalty.mu * settings.penalty_growth).min(MAX_PENALTY);
        }
        prev_kkt = kkt;
        last = Some(inner);
        if done {
            break;
        }
    }
    let last = last.expect("at least one outer round");
    let violation = last.eval.constraint.max(0.0);
    diagnostics.stationarity = last.stationarity;
    diagnostics.dual = penalty.dual;
    if violation > settings.constraint_tol {
        let Some((u_feasible, stationarity, dual)) = feasible else {
            return Err(Error::SolverInfeasible {
                violation,
                iterations: diagnostics.iterations,
            });
        };
        u = u_feasible;
        diagnostics.stationarity = stationarity;
        diagnostics.dual = dual;
    }
    let eval = ev.rollout(&u, Penalty::NONE)?;
    diagnostics.violation = eval.constraint.max(0.0);
    diagnostics.penalty = penalty.mu;

    let mut cost = eval.cost;
    if warm_eval.constraint <= settings.constraint_tol && warm_eval.cost < cost {
        u = warm_u;
        cost = warm_eval.cost;
        diagnostics.violation = warm_eval.constraint.max(0.0);
        diagnostics.kept_warm_start = true;
    }
    let multipliers = unflatten(&u, m);
    let (check_cost, states) = crate::ocp::evaluate_cost(problem, x0, &multipliers)?;
    debug_assert!((check_cost - cost).abs() <= 1e-9 * cost.abs().max(1.0));
    let terminal_value = problem.terminal.value(states.last().expect("nonempty"));
    diagnostics.wall_time = started.elapsed();
    Ok(OcpSolution {
        multipliers,
        states,
        cost: check_cost,
        terminal_value,
        diagnostics,
    })
}

/// `J_N` and its gradient with respect to the raw multipliers, flattened as
/// `grad[k·|Ω| + i] = ∂J_N/∂u_{k,i}`.
pub fn cost_gradient(problem: &OcpProblem, x0: &[f64], multipliers: &[SimplexVector]) -> Result<(f64, Vec<f64>)> {
    check_dim("initial state", problem.state_dim(), x0.len())?;
    check_dim("multiplier sequence", problem.horizon(), multipliers.len())?;
    let u = flatten(multipliers);
    check_dim("flattened multipliers", problem.horizon() * problem.cardinality(), u.len())?;
    raw_cost_gradient(problem, x0, &u)
}

fn raw_cost_gradient(problem: &OcpProblem, x0: &[f64], u: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut ev = Evaluator::new(problem, x0);
    let eval = ev.rollout(u, Penalty::NONE)?;
    let mut grad = vec![0.0; u.len()];
    ev.gradient(u, Penalty::NONE, eval.constraint, &mut grad);
    Ok((eval.cost, grad))
}

/// Relative error `|a − b| / max(|b|, 10⁻²)` with a floor for near-zero entries.
pub fn gradient_relative_error(adjoint: f64, reference: f64) -> f64 {
    (adjoint - reference).abs() / reference.abs().max(1e-2)
}

/// Largest relative error between the adjoint gradient and central
/// differences over `points` random multiplier sequences and states near `x0`.
pub fn gradient_check(problem: &OcpProblem, x0: &[f64], points: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = problem.horizon() * problem.cardinality();
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let x: Vec<f64> = x0.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
        let mut u: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
        project_blocks(&mut u, problem.cardinality());
        let (_, grad) = raw_cost_gradient(problem, &x, &u)?;
        for (j, &g) in grad.iter().enumerate() {
            let h = 1e-5;
            let mut shifted = u.clone();
            shifted[j] = u[j] + h;
            let plus = raw_cost_gradient(problem, &x, &shifted)?.0;
            shifted[j] = u[j] - h;
            let minus = raw_cost_gradient(problem, &x, &shifted)?.0;
            worst = worst.max(gradient_relative_error(g, (plus - minus) / (2.0 * h)));
        }
    }
    Ok(worst)
}
