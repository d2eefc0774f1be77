//! Terminal ingredients and finite-horizon cost evaluation.
//!
//! The terminal cost is `V_f(x) = xᵀPx` with `P` from the discrete-time
//! algebraic Riccati equation of the relaxed system linearized at the steady
//! state `(x_f, u_f)`, the terminal set is the sublevel set `{V_f ≤ π}`, and
//! the terminal control law is the simplex-projected LQR feedback.
//!
//! The steady state is expected at the origin of the state space; shift the
//! model otherwise.

use std::sync::Arc;
use std::time::Duration;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::convexification::{project_simplex, quadratic_form, stage_cost, ControlSet, CostVariant, SimplexVector};
use crate::dynamics::{advance_convexified, GridSpec, OdeModel, Workspace};
use crate::error::{check_dim, Error, Result};

/// Tolerance on `‖F(x_f)u_f − x_f‖` for a point to count as a steady state.
pub const STEADY_STATE_TOL: f64 = 1e-8;

/// Fixed-point iterations allowed for the Riccati recursion.
pub const DARE_MAX_ITERATIONS: usize = 100_000;

/// Stopping tolerance of the Riccati recursion.
pub const DARE_TOL: f64 = 1e-12;

/// Terminal cost matrix, terminal level and LQR gain.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalIngredients {
    /// Terminal weight `P`.
    pub p: DMatrix<f64>,
    /// Terminal level `π`.
    pub level: f64,
    /// LQR gain `K` in raw multiplier coordinates (`|Ω| × n_x`).
    pub gain: DMatrix<f64>,
    /// Cost inflation `ϱ`.
    pub inflation: f64,
    /// Input weight `W = diag(R)`.
    pub input_weight: DMatrix<f64>,
    pub steady_state: Vec<f64>,
    pub reference: SimplexVector,
}

impl TerminalIngredients {
    /// Linearizes the relaxed system at `(x_f, u_f)` and solves the Riccati
    /// equation with `W = diag(R)`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_linearization(
        model: &dyn OdeModel,
        ctrl: &ControlSet,
        steady_state: &[f64],
        reference: &SimplexVector,
        grid: &GridSpec,
        state_weight: &DMatrix<f64>,
        level: f64,
        inflation: f64,
    ) -> Result<Self> {
        if !(level > 0.0) {
            return Err(Error::config("terminal.level", "must be positive"));
        }
        if !(inflation >= 1.0) {
            return Err(Error::config("terminal.inflation", "must be at least 1"));
        }
        let (a, b) = linearize(model, ctrl, steady_state, reference, grid)?;
        let w = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(ctrl.cost_row()));
        let dare = solve_dare(&a, &b, state_weight, &w, inflation)?;
        Ok(TerminalIngredients {
            p: dare.p,
            level,
            gain: dare.gain,
            inflation,
            input_weight: w,
            steady_state: steady_state.to_vec(),
            reference: reference.clone(),
        })
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        terminal_value(&self.p, x)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        terminal_membership(&self.p, self.level, x)
    }

    pub fn control_law(&self, x: &[f64]) -> SimplexVector {
        terminal_control_law(&self.gain, &self.reference, &self.steady_state, x)
    }
}

/// Jacobians `(A, B)` of `(x, u) ↦ F(x)u` over one coarse step at `(x_f, u_f)`,
/// by central differences. `B` has one column per raw multiplier entry.
pub fn linearize(
    model: &dyn OdeModel,
    ctrl: &ControlSet,
    steady_state: &[f64],
    reference: &SimplexVector,
    grid: &GridSpec,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = model.state_dim();
    check_dim("steady state", n, steady_state.len())?;
    check_dim("reference multiplier", ctrl.len(), reference.len())?;
    let h_sub = grid.substep_len();
    let count = grid.substeps_per_coarse();
    let mut ws = Workspace::new(n);
    let mut step = |x: &[f64], u: &[f64]| -> Result<Vec<f64>> {
        let mut y = x.to_vec();
        advance_convexified(model, ctrl, &mut y, u, h_sub, count, &mut ws)?;
        Ok(y)
    };

    let uf = reference.weights();
    let image = step(steady_state, uf)?;
    let residual = image
        .iter()
        .zip(steady_state)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if residual > STEADY_STATE_TOL {
        return Err(Error::Precondition(format!(
            "({steady_state:?}, {uf:?}) is not a steady state of the discrete map (residual {residual:e})"
        )));
    }

    let mut a = DMatrix::zeros(n, n);
    let mut x = steady_state.to_vec();
    for j in 0..n {
        let h = 1e-6 * steady_state[j].abs().max(1.0);
        x[j] = steady_state[j] + h;
        let plus = step(&x, uf)?;
        x[j] = steady_state[j] - h;
        let minus = step(&x, uf)?;
        x[j] = steady_state[j];
        for i in 0..n {
            a[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }

    let m = ctrl.len();
    let mut b = DMatrix::zeros(n, m);
    let mut u = uf.to_vec();
    for j in 0..m {
        let h = 1e-6;
        u[j] = uf[j] + h;
        let plus = step(steady_state, &u)?;
        u[j] = uf[j] - h;
        let minus = step(steady_state, &u)?;
        u[j] = uf[j];
        for i in 0..n {
            b[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    Ok((a, b))
}

/// Stabilizing Riccati solution and the associated gain.
#[derive(Debug, Clone, PartialEq)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    /// `K = (ϱW + BᵀPB)⁻¹BᵀPA`
    pub gain: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
}

fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    w: &DMatrix<f64>,
    rho: f64,
    p: &DMatrix<f64>,
) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let pa = p * a;
    let bt = b.transpose();
    let gram = w * rho + &bt * p * b;
    let gain = gram.lu().solve(&(&bt * &pa))?;
    let next = a.transpose() * &pa - a.transpose() * p * b * &gain + q * rho;
    Some(((&next + next.transpose()) * 0.5, gain))
}

/// Residual `‖AᵀPA − (AᵀPB)(ϱW + BᵀPB)⁻¹(BᵀPA) + ϱQ − P‖_F`.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    w: &DMatrix<f64>,
    rho: f64,
    p: &DMatrix<f64>,
) -> f64 {
    match riccati_map(a, b, q, w, rho, p) {
        Some((next, _)) => (next - p).norm(),
        None => f64::INFINITY,
    }
}

/// Fixed-point iteration of the Riccati map from `P₀ = ϱQ`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    w: &DMatrix<f64>,
    rho: f64,
) -> Result<DareSolution> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || w.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::Precondition("inconsistent Riccati matrix shapes".into()));
    }
    let mut p = q * rho;
    let mut residual = f64::INFINITY;
    for iteration in 1..=DARE_MAX_ITERATIONS {
        let (next, _) = riccati_map(a, b, q, w, rho, &p).ok_or(Error::Stabilizability {
            iterations: iteration,
            residual,
        })?;
        residual = (&next - &p).norm();
        p = next;
        if !residual.is_finite() {
            break;
        }
        // Relative stopping rule: an absolute 1e-12 is below rounding noise once ‖P‖ ≫ 1.
        if residual <= DARE_TOL * p.norm().max(1.0) {
            let (_, gain) = riccati_map(a, b, q, w, rho, &p).ok_or(Error::Stabilizability {
                iterations: iteration,
                residual,
            })?;
            let residual = dare_residual(a, b, q, w, rho, &p);
            return Ok(DareSolution {
                p,
                gain,
                iterations: iteration,
                residual,
            });
        }
    }
    Err(Error::Stabilizability {
        iterations: DARE_MAX_ITERATIONS,
        residual,
    })
}

/// `V_f(x) = xᵀPx`.
pub fn terminal_value(p: &DMatrix<f64>, x: &[f64]) -> f64 {
    quadratic_form(p, x)
}

/// `xᵀPx ≤ π`.
pub fn terminal_membership(p: &DMatrix<f64>, level: f64, x: &[f64]) -> bool {
    terminal_value(p, x) <= level
}

/// `κ_f(x) = Π_simplex(u_f − K(x − x_f))`.
pub fn terminal_control_law(gain: &DMatrix<f64>, reference: &SimplexVector, steady_state: &[f64], x: &[f64]) -> SimplexVector {
    let uf = reference.weights();
    let mut raw = uf.to_vec();
    for (i, r) in raw.iter_mut().enumerate() {
        for j in 0..x.len() {
            *r -= gain[(i, j)] * (x[j] - steady_state[j]);
        }
    }
    project_simplex(&raw)
}

/// Everything that defines the finite-horizon problem except the initial state.
#[derive(Clone)]
pub struct OcpProblem {
    pub model: Arc<dyn OdeModel>,
    pub controls: ControlSet,
    pub cost: CostVariant,
    pub state_weight: DMatrix<f64>,
    pub terminal: TerminalIngredients,
    /// Coarse step, horizon and integration substep. The oversampling factor
    /// is irrelevant to the optimization.
    pub grid: GridSpec,
}

impl std::fmt::Debug for OcpProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OcpProblem")
            .field("controls", &self.controls)
            .field("cost", &self.cost)
            .field("state_weight", &self.state_weight)
            .field("terminal", &self.terminal)
            .field("grid", &self.grid)
            .finish_non_exhaustive()
    }
}

impl OcpProblem {
    pub fn horizon(&self) -> usize {
        self.grid.horizon
    }

    pub fn cardinality(&self) -> usize {
        self.controls.len()
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    pub fn stage_cost(&self, x: &[f64], u: &SimplexVector) -> f64 {
        stage_cost(&self.controls, &self.cost, x, u, &self.state_weight)
    }

    /// One coarse step of the relaxed dynamics.
    pub fn step(&self, x: &[f64], u: &SimplexVector) -> Result<Vec<f64>> {
        check_dim("multiplier", self.cardinality(), u.len())?;
        let mut y = x.to_vec();
        let mut ws = Workspace::new(x.len());
        advance_convexified(
            self.model.as_ref(),
            &self.controls,
            &mut y,
            u.weights(),
            self.grid.substep_len(),
            self.grid.substeps_per_coarse(),
            &mut ws,
        )?;
        Ok(y)
    }

    /// All-`u_f` sequence of horizon length.
    pub fn reference_sequence(&self) -> Vec<SimplexVector> {
        vec![self.cost.reference.clone(); self.horizon()]
    }
}

/// `J_N(x₀, u)` and the predicted states `x₀ … x_N`. The horizon is the
/// length of `multipliers`.
pub fn evaluate_cost(problem: &OcpProblem, x0: &[f64], multipliers: &[SimplexVector]) -> Result<(f64, Vec<Vec<f64>>)> {
    check_dim("initial state", problem.state_dim(), x0.len())?;
    let mut states = Vec::with_capacity(multipliers.len() + 1);
    let mut x = x0.to_vec();
    let mut ws = Workspace::new(x.len());
    let mut cost = 0.0;
    for u in multipliers {
        check_dim("multiplier", problem.cardinality(), u.len())?;
        cost += problem.stage_cost(&x, u);
        states.push(x.clone());
        advance_convexified(
            problem.model.as_ref(),
            &problem.controls,
            &mut x,
            u.weights(),
            problem.grid.substep_len(),
            problem.grid.substeps_per_coarse(),
            &mut ws,
        )?;
    }
    cost += problem.terminal.value(&x);
    states.push(x);
    Ok((cost, states))
}

/// Outcome of the sampled terminal decrease check.
#[derive(Debug, Clone, Serialize)]
pub struct TerminalCheck {
    pub samples: usize,
    /// Samples where `V_f(F(x)κ_f(x)) − V_f(x) > −ℓ(x, κ_f(x))`.
    pub decrease_failures: usize,
    /// Samples whose successor leaves the terminal set.
    pub invariance_failures: usize,
    /// Largest `V_f(x⁺) − V_f(x) + ℓ(x, κ_f(x))` seen.
    pub worst_margin: f64,
}

impl TerminalCheck {
    pub fn pass_fraction(&self) -> f64 {
        let failed = self.decrease_failures.max(self.invariance_failures);
        1.0 - failed as f64 / self.samples as f64
    }
}

/// Samples the terminal set uniformly and checks the invariance and decrease
/// conditions for the terminal control law. Diagnostic only.
pub fn check_terminal_decrease(problem: &OcpProblem, samples: usize, seed: u64) -> Result<TerminalCheck> {
    let terminal = &problem.terminal;
    let n = problem.state_dim();
    let chol = terminal
        .p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Precondition("terminal weight is not positive definite".into()))?;
    // x = √π L⁻ᵀ z maps the unit ball onto {xᵀPx ≤ π}.
    let lt_inv = chol
        .l()
        .transpose()
        .try_inverse()
        .ok_or_else(|| Error::Precondition("singular Cholesky factor".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = TerminalCheck {
        samples,
        decrease_failures: 0,
        invariance_failures: 0,
        worst_margin: f64::NEG_INFINITY,
    };
    let mut z = vec![0.0; n];
    for _ in 0..samples {
        loop {
            for zi in z.iter_mut() {
                *zi = rng.random_range(-1.0..1.0);
            }
            if z.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                break;
            }
        }
        let x: Vec<f64> = (0..n)
            .map(|i| {
                terminal.steady_state[i]
                    + terminal.level.sqrt() * (0..n).map(|j| lt_inv[(i, j)] * z[j]).sum::<f64>()
            })
            .collect();
        let u = terminal.control_law(&x);
        let next = problem.step(&x, &u)?;
        let margin = terminal.value(&next) - terminal.value(&x) + problem.stage_cost(&x, &u);
        check.worst_margin = check.worst_margin.max(margin);
        if margin > 1e-12 {
            check.decrease_failures += 1;
        }
        if !terminal.contains(&next) {
            check.invariance_failures += 1;
        }
    }
    Ok(check)
}

/// Solver statistics reported with every solution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveDiagnostics {
    /// Inner projected-gradient iterations over all rounds.
    pub iterations: usize,
    pub outer_rounds: usize,
    /// `‖u − Π(u − ∇L)‖∞` at the returned point.
    pub stationarity: f64,
    /// `max(0, V_f(x_N) − π)`.
    pub violation: f64,
    /// Terminal-constraint multiplier.
    pub dual: f64,
    pub penalty: f64,
    pub wall_time: Duration,
    /// The warm start was returned because it was cheaper than the iterate.
    pub kept_warm_start: bool,
}

/// Optimal multipliers, predicted states and cost of one OCP solve.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub multipliers: Vec<SimplexVector>,
    pub states: Vec<Vec<f64>>,
    /// `J_N` at the returned multipliers.
    pub cost: f64,
    /// `V_f(x_N)`
    pub terminal_value: f64,
    pub diagnostics: SolveDiagnostics,
}
