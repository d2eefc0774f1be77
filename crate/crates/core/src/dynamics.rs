//! Continuous-time models and their fixed-step discretizations.
//!
//! Every map in this module is built on the explicit midpoint rule with a
//! uniform substep. The convexified field `Σ uᵢ f(x, vⁱ)` is integrated as a
//! single ODE, so a unit multiplier `eʲ` reproduces the plain integration with
//! `vʲ` bit for bit.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::convexification::{ControlSet, SimplexVector};
use crate::error::{check_dim, Error, Result};

/// An autonomous ODE `ẋ = f(x, v)` with constant control over each step.
pub trait OdeModel: Send + Sync {
    fn state_dim(&self) -> usize;

    fn input_dim(&self) -> usize;

    /// Writes `f(x, v)` into `dx`.
    fn eval(&self, x: &[f64], v: &[f64], dx: &mut [f64]);

    /// Row-major `∂f/∂x` at `(x, v)`. The default uses central differences;
    /// models should override it when the Jacobian is known in closed form.
    fn state_jacobian(&self, x: &[f64], v: &[f64], jac: &mut [f64]) {
        let n = self.state_dim();
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for j in 0..n {
            let h = 1e-6 * x[j].abs().max(1.0);
            xp[j] = x[j] + h;
            self.eval(&xp, v, &mut fp);
            xp[j] = x[j] - h;
            self.eval(&xp, v, &mut fm);
            xp[j] = x[j];
            for i in 0..n {
                jac[i * n + j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
    }

    /// A declared steady state `(x_f, v_f)` with `f(x_f, v_f) = 0`, if any.
    fn steady_state(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }
}

/// Van der Pol oscillator with a sinusoidal input:
/// `ẋ₁ = x₂`, `ẋ₂ = μ(1 − x₁²)x₂ − x₁ + sin v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VanDerPol {
    pub damping: f64,
}

impl Default for VanDerPol {
    fn default() -> Self {
        VanDerPol { damping: 1.0 }
    }
}

impl OdeModel for VanDerPol {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn eval(&self, x: &[f64], v: &[f64], dx: &mut [f64]) {
        dx[0] = x[1];
        dx[1] = self.damping * (1.0 - x[0] * x[0]) * x[1] - x[0] + v[0].sin();
    }

    fn state_jacobian(&self, x: &[f64], _v: &[f64], jac: &mut [f64]) {
        jac[0] = 0.0;
        jac[1] = 1.0;
        jac[2] = -2.0 * self.damping * x[0] * x[1] - 1.0;
        jac[3] = self.damping * (1.0 - x[0] * x[0]);
    }

    fn steady_state(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((vec![0.0, 0.0], vec![0.0]))
    }
}

/// Linear time-invariant model `ẋ = A x + B v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Precondition("state matrix must be square".into()));
        }
        check_dim("input matrix rows", a.nrows(), b.nrows())?;
        Ok(LinearModel { a, b })
    }

    pub fn scalar(a: f64, b: f64) -> Self {
        LinearModel {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
        }
    }
}

impl OdeModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn eval(&self, x: &[f64], v: &[f64], dx: &mut [f64]) {
        for (i, d) in dx.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, xj) in x.iter().enumerate() {
                acc += self.a[(i, j)] * xj;
            }
            for (j, vj) in v.iter().enumerate() {
                acc += self.b[(i, j)] * vj;
            }
            *d = acc;
        }
    }

    fn state_jacobian(&self, _x: &[f64], _v: &[f64], jac: &mut [f64]) {
        let n = self.state_dim();
        for i in 0..n {
            for j in 0..n {
                jac[i * n + j] = self.a[(i, j)];
            }
        }
    }

    fn steady_state(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((vec![0.0; self.state_dim()], vec![0.0; self.input_dim()]))
    }
}

pub type ModelParams = BTreeMap<String, f64>;

type ModelFactory = Box<dyn Fn(&ModelParams) -> Result<Arc<dyn OdeModel>> + Send + Sync>;

/// Name-to-model lookup used by the configuration layer.
pub struct ModelRegistry {
    factories: HashMap<String, ModelFactory>,
}

impl fmt::Debug for ModelRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<_> = self.factories.keys().collect();
        names.sort();
        f.debug_struct("ModelRegistry").field("models", &names).finish()
    }
}

impl Default for ModelRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl ModelRegistry {
    pub fn empty() -> Self {
        ModelRegistry {
            factories: HashMap::new(),
        }
    }

    /// `vanderpol` (parameter `damping`, default 1) and the scalar
    /// `linear` model (parameters `a`, `b`).
    pub fn with_builtins() -> Self {
        let mut registry = Self::empty();
        registry.register("vanderpol", |params| {
            reject_unknown(params, &["damping"])?;
            let damping = params.get("damping").copied().unwrap_or(1.0);
            Ok(Arc::new(VanDerPol { damping }) as Arc<dyn OdeModel>)
        });
        registry.register("linear", |params| {
            reject_unknown(params, &["a", "b"])?;
            let a = params.get("a").copied().unwrap_or(0.0);
            let b = params.get("b").copied().unwrap_or(1.0);
            Ok(Arc::new(LinearModel::scalar(a, b)) as Arc<dyn OdeModel>)
        });
        registry
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&ModelParams) -> Result<Arc<dyn OdeModel>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn build(&self, name: &str, params: &ModelParams) -> Result<Arc<dyn OdeModel>> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| Error::UnknownModel(name.to_string()))?;
        factory(params)
    }
}

fn reject_unknown(params: &ModelParams, known: &[&str]) -> Result<()> {
    match params.keys().find(|k| !known.contains(&k.as_str())) {
        Some(k) => Err(Error::config(format!("model.params.{k}"), "unknown model parameter")),
        None => Ok(()),
    }
}

/// Coarse control grid, oversampling factor and integration substep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub coarse_step: f64,
    pub horizon: usize,
    pub oversample_factor: usize,
    pub integration_substep: f64,
}

impl GridSpec {
    pub fn new(coarse_step: f64, horizon: usize, oversample_factor: usize, integration_substep: f64) -> Result<Self> {
        if !(coarse_step.is_finite() && coarse_step > 0.0) {
            return Err(Error::config("grid.coarse_step", "must be positive"));
        }
        if oversample_factor == 0 {
            return Err(Error::config("grid.oversample_factor", "must be at least 1"));
        }
        if !(integration_substep.is_finite() && integration_substep > 0.0) {
            return Err(Error::config("grid.integration_substep", "must be positive"));
        }
        let grid = GridSpec {
            coarse_step,
            horizon,
            oversample_factor,
            integration_substep,
        };
        let ratio = grid.fine_step() / integration_substep;
        if ratio < 0.5 || (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::config(
                "grid.integration_substep",
                format!("{integration_substep} does not divide the fine step {}", grid.fine_step()),
            ));
        }
        Ok(grid)
    }

    /// `δt = Δt / N_os`.
    pub fn fine_step(&self) -> f64 {
        self.coarse_step / self.oversample_factor as f64
    }

    /// `t_f = N·Δt`.
    pub fn final_time(&self) -> f64 {
        self.horizon as f64 * self.coarse_step
    }

    pub fn substeps_per_fine(&self) -> usize {
        (self.fine_step() / self.integration_substep).round() as usize
    }

    pub fn substeps_per_coarse(&self) -> usize {
        self.substeps_per_fine() * self.oversample_factor
    }

    /// The substep length shared by every map on this grid. It is derived
    /// from the coarse step so coarse and fine simulations use the same value.
    pub fn substep_len(&self) -> f64 {
        self.coarse_step / self.substeps_per_coarse() as f64
    }

    pub fn with_oversampling(&self, oversample_factor: usize) -> Result<Self> {
        GridSpec::new(self.coarse_step, self.horizon, oversample_factor, self.integration_substep)
    }
}

/// Sampled states of a simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least the initial state")
    }
}

/// Scratch buffers for the midpoint scheme.
pub(crate) struct Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    xm: Vec<f64>,
    f: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(n: usize) -> Self {
        Workspace {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            xm: vec![0.0; n],
            f: vec![0.0; n],
        }
    }
}

/// `Σ uᵢ f(x, vⁱ)` over the nonzero weights. The first nonzero term
/// initializes the sum so a unit multiplier returns `f(x, vʲ)` exactly.
pub(crate) fn convexified_field(
    model: &dyn OdeModel,
    ctrl: &ControlSet,
    x: &[f64],
    u: &[f64],
    out: &mut [f64],
    scratch: &mut [f64],
) {
    let mut first = true;
    for (i, &ui) in u.iter().enumerate() {
        if ui == 0.0 {
            continue;
        }
        model.eval(x, ctrl.value(i), scratch);
        if first {
            for (o, s) in out.iter_mut().zip(scratch.iter()) {
                *o = ui * s;
            }
            first = false;
        } else {
            for (o, s) in out.iter_mut().zip(scratch.iter()) {
                *o += ui * s;
            }
        }
    }
    if first {
        out.fill(0.0);
    }
}

/// One midpoint substep of the field `field`, in place.
#[inline]
fn midpoint_substep(
    x: &mut [f64],
    h: f64,
    ws: &mut Workspace,
    mut field: impl FnMut(&[f64], &mut [f64], &mut [f64]),
) {
    let Workspace { k1, k2, xm, f } = ws;
    field(x, k1, f);
    for i in 0..x.len() {
        xm[i] = x[i] + 0.5 * h * k1[i];
    }
    field(xm, k2, f);
    for i in 0..x.len() {
        x[i] += h * k2[i];
    }
}

fn check_finite(x: &[f64], substep: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::IntegrationOverflow { substep })
    }
}

/// Advances `x` by `count` substeps of length `h_sub` under the convexified
/// field with constant multiplier `u`.
pub(crate) fn advance_convexified(
    model: &dyn OdeModel,
    ctrl: &ControlSet,
    x: &mut [f64],
    u: &[f64],
    h_sub: f64,
    count: usize,
    ws: &mut Workspace,
) -> Result<()> {
    for s in 0..count {
        midpoint_substep(x, h_sub, ws, |y, out, scratch| {
            convexified_field(model, ctrl, y, u, out, scratch)
        });
        check_finite(x, s)?;
    }
    Ok(())
}

fn check_state(model: &dyn OdeModel, x: &[f64]) -> Result<()> {
    check_dim("state", model.state_dim(), x.len())
}

fn check_substeps(h: f64, substeps: usize) -> Result<()> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Precondition(format!("step length must be positive, got {h}")));
    }
    if substeps == 0 {
        return Err(Error::Precondition("at least one substep is required".into()));
    }
    Ok(())
}

/// `f(x, v)` with dimension checks.
pub fn eval_vector_field(model: &dyn OdeModel, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_state(model, x)?;
    check_dim("control value", model.input_dim(), v.len())?;
    let mut dx = vec![0.0; x.len()];
    model.eval(x, v, &mut dx);
    Ok(dx)
}

/// Advances `x` by `h` under the constant control `v`, using `substeps`
/// uniform midpoint substeps.
pub fn integrate_step(model: &dyn OdeModel, x: &[f64], v: &[f64], h: f64, substeps: usize) -> Result<Vec<f64>> {
    check_state(model, x)?;
    check_dim("control value", model.input_dim(), v.len())?;
    check_substeps(h, substeps)?;
    let h_sub = h / substeps as f64;
    let mut ws = Workspace::new(x.len());
    let mut state = x.to_vec();
    for s in 0..substeps {
        midpoint_substep(&mut state, h_sub, &mut ws, |y, out, _| model.eval(y, v, out));
        check_finite(&state, s)?;
    }
    Ok(state)
}

/// The convexified discrete map `F(x)·u` over a step of length `h`.
pub fn convexified_map(
    model: &dyn OdeModel,
    ctrl: &ControlSet,
    x: &[f64],
    u: &SimplexVector,
    h: f64,
    substeps: usize,
) -> Result<Vec<f64>> {
    check_state(model, x)?;
    check_dim("multiplier", ctrl.len(), u.len())?;
    check_dim("control value", model.input_dim(), ctrl.input_dim())?;
    check_substeps(h, substeps)?;
    let mut ws = Workspace::new(x.len());
    let mut state = x.to_vec();
    advance_convexified(model, ctrl, &mut state, u.weights(), h / substeps as f64, substeps, &mut ws)?;
    Ok(state)
}

/// Simulates a multiplier sequence on the oversampling grid, one element per
/// fine step of length `fine_step`, each split into `substeps` substeps.
pub fn simulate_oversampled(
    model: &dyn OdeModel,
    ctrl: &ControlSet,
    x: &[f64],
    omega_seq: &[SimplexVector],
    fine_step: f64,
    substeps: usize,
) -> Result<Trajectory> {
    check_substeps(fine_step, substeps)?;
    simulate_with_substep(model, ctrl, x, omega_seq, fine_step / substeps as f64, substeps)
}

/// As [`simulate_oversampled`], with the substep length given directly.
pub(crate) fn simulate_with_substep(
    model: &dyn OdeModel,
    ctrl: &ControlSet,
    x: &[f64],
    omega_seq: &[SimplexVector],
    h_sub: f64,
    substeps: usize,
) -> Result<Trajectory> {
    check_state(model, x)?;
    check_dim("control value", model.input_dim(), ctrl.input_dim())?;
    let fine_step = h_sub * substeps as f64;
    let mut ws = Workspace::new(x.len());
    let mut state = x.to_vec();
    let mut times = Vec::with_capacity(omega_seq.len() + 1);
    let mut states = Vec::with_capacity(omega_seq.len() + 1);
    times.push(0.0);
    states.push(state.clone());
    for (m, omega) in omega_seq.iter().enumerate() {
        check_dim("multiplier", ctrl.len(), omega.len())?;
        advance_convexified(model, ctrl, &mut state, omega.weights(), h_sub, substeps, &mut ws)
            .map_err(|e| match e {
                Error::IntegrationOverflow { substep } => Error::IntegrationOverflow {
                    substep: m * substeps + substep,
                },
                other => other,
            })?;
        times.push((m + 1) as f64 * fine_step);
        states.push(state.clone());
    }
    Ok(Trajectory { times, states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn vdp_controls() -> ControlSet {
        ControlSet::with_input_cost(vec![vec![-1.0], vec![1.0]], |v| v[0] * v[0]).unwrap()
    }

    #[test]
    fn van_der_pol_field_examples() {
        let m = VanDerPol::default();
        let f = eval_vector_field(&m, &[0.0, 0.0], &[1.0]).unwrap();
        assert_eq!(f, vec![0.0, 1f64.sin()]);
        assert_abs_diff_eq!(f[1], 0.841471, epsilon = 1e-6);
        assert_eq!(eval_vector_field(&m, &[0.5, 0.0], &[0.0]).unwrap(), vec![0.0, -0.5]);
        assert_eq!(eval_vector_field(&m, &[1.0, 1.0], &[0.0]).unwrap(), vec![1.0, -1.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = VanDerPol::default();
        assert!(matches!(
            eval_vector_field(&m, &[0.0], &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            integrate_step(&m, &[0.0, 0.0], &[1.0, 2.0], 0.1, 1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn analytic_jacobian_matches_default_differences() {
        struct Fd(VanDerPol);
        impl OdeModel for Fd {
            fn state_dim(&self) -> usize {
                2
            }
            fn input_dim(&self) -> usize {
                1
            }
            fn eval(&self, x: &[f64], v: &[f64], dx: &mut [f64]) {
                self.0.eval(x, v, dx)
            }
        }
        let exact = VanDerPol::default();
        let fd = Fd(exact);
        let (mut a, mut b) = ([0.0; 4], [0.0; 4]);
        exact.state_jacobian(&[0.3, -0.7], &[1.0], &mut a);
        fd.state_jacobian(&[0.3, -0.7], &[1.0], &mut b);
        for i in 0..4 {
            assert_abs_diff_eq!(a[i], b[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn one_midpoint_step_of_decay() {
        let m = LinearModel::scalar(-1.0, 0.0);
        let x = integrate_step(&m, &[1.0], &[0.0], 0.1, 1).unwrap();
        assert_abs_diff_eq!(x[0], 0.905, epsilon = 1e-15);
    }

    #[test]
    fn growth_matches_exponential() {
        let m = LinearModel::scalar(1.0, 0.0);
        let x = integrate_step(&m, &[1.0], &[0.0], 0.1, 100).unwrap();
        assert_abs_diff_eq!(x[0], 0.1f64.exp(), epsilon = 1e-6);
    }

    #[test]
    fn steady_state_is_fixed() {
        let m = VanDerPol::default();
        let (xf, vf) = m.steady_state().unwrap();
        assert_eq!(integrate_step(&m, &xf, &vf, 0.15, 30).unwrap(), xf);
        let ctrl = vdp_controls();
        for substeps in [1, 7, 30] {
            let x = convexified_map(&m, &ctrl, &xf, &SimplexVector::uniform(2), 0.15, substeps).unwrap();
            assert_eq!(x, vec![0.0, 0.0]);
        }
    }

    #[test]
    fn unit_multiplier_collapses_bitwise() {
        let m = VanDerPol::default();
        let ctrl = vdp_controls();
        let x0 = [0.37, -0.81];
        for j in 0..2 {
            let a = convexified_map(&m, &ctrl, &x0, &SimplexVector::unit(2, j), 0.15, 30).unwrap();
            let b = integrate_step(&m, &x0, ctrl.value(j), 0.15, 30).unwrap();
            assert_eq!(a, b);
        }
    }

    /// Classic RK4 on the averaged Van der Pol field, written out by hand.
    fn rk4_oracle(x0: [f64; 2], w: f64, h: f64, n: usize) -> [f64; 2] {
        let f = |x: [f64; 2]| [x[1], (1.0 - x[0] * x[0]) * x[1] - x[0] + w];
        let mut x = x0;
        let dt = h / n as f64;
        for _ in 0..n {
            let k1 = f(x);
            let k2 = f([x[0] + 0.5 * dt * k1[0], x[1] + 0.5 * dt * k1[1]]);
            let k3 = f([x[0] + 0.5 * dt * k2[0], x[1] + 0.5 * dt * k2[1]]);
            let k4 = f([x[0] + dt * k3[0], x[1] + dt * k3[1]]);
            for i in 0..2 {
                x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        x
    }

    #[test]
    fn convexified_map_matches_fine_integration() {
        let m = VanDerPol::default();
        let ctrl = vdp_controls();
        let u = SimplexVector::uniform(2);
        // 0.5·sin(−1) + 0.5·sin(1) = 0
        let oracle = rk4_oracle([0.5, 0.0], 0.0, 0.15, 3000);
        let fine = convexified_map(&m, &ctrl, &[0.5, 0.0], &u, 0.15, 3000).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(fine[i], oracle[i], epsilon = 1e-8);
        }
        // On the default 0.005 s substep the second-order error is ~h·δ².
        let coarse = convexified_map(&m, &ctrl, &[0.5, 0.0], &u, 0.15, 30).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(coarse[i], oracle[i], epsilon = 1e-5);
        }
        let skewed = SimplexVector::new(vec![0.2, 0.8]).unwrap();
        let oracle = rk4_oracle([0.5, 0.0], 0.6 * 1f64.sin(), 0.15, 3000);
        let fine = convexified_map(&m, &ctrl, &[0.5, 0.0], &skewed, 0.15, 3000).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(fine[i], oracle[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn midpoint_converges_with_order_two() {
        let m = VanDerPol::default();
        let x0 = [0.8, -0.4];
        let reference = integrate_step(&m, &x0, &[0.3], 0.15, 4800).unwrap();
        let err = |n| {
            let x = integrate_step(&m, &x0, &[0.3], 0.15, n).unwrap();
            ((x[0] - reference[0]).powi(2) + (x[1] - reference[1]).powi(2)).sqrt()
        };
        for n in [5, 10, 20] {
            let order = (err(n) / err(2 * n)).log2();
            assert!(order >= 1.9, "observed order {order} at {n} substeps");
        }
    }

    #[test]
    fn semigroup_property() {
        let m = VanDerPol::default();
        let ctrl = vdp_controls();
        let u = SimplexVector::new(vec![0.3, 0.7]).unwrap();
        let whole = convexified_map(&m, &ctrl, &[0.2, 0.1], &u, 0.3, 60).unwrap();
        let half = convexified_map(&m, &ctrl, &[0.2, 0.1], &u, 0.15, 30).unwrap();
        let twice = convexified_map(&m, &ctrl, &half, &u, 0.15, 30).unwrap();
        assert_eq!(whole, twice);
    }

    #[test]
    fn oversampled_simulation() {
        let m = VanDerPol::default();
        let ctrl = vdp_controls();
        let x0 = [0.5, 0.0];
        let empty = simulate_oversampled(&m, &ctrl, &x0, &[], 0.015, 3).unwrap();
        assert_eq!(empty.states, vec![x0.to_vec()]);

        let u = SimplexVector::new(vec![0.3, 0.7]).unwrap();
        let grid = GridSpec::new(0.15, 20, 10, 0.005).unwrap();
        let seq = vec![u.clone(); 10];
        let traj = simulate_with_substep(&m, &ctrl, &x0, &seq, grid.substep_len(), grid.substeps_per_fine()).unwrap();
        let mut ws = Workspace::new(2);
        let mut direct = x0.to_vec();
        advance_convexified(&m, &ctrl, &mut direct, u.weights(), grid.substep_len(), 30, &mut ws).unwrap();
        assert_eq!(traj.last(), direct.as_slice());
        assert_eq!(traj.len(), 11);

        let alternating = [SimplexVector::unit(2, 0), SimplexVector::unit(2, 1)];
        let traj = simulate_oversampled(&m, &ctrl, &[0.0, 0.0], &alternating, 0.075, 15).unwrap();
        let first = integrate_step(&m, &[0.0, 0.0], &[-1.0], 0.075, 15).unwrap();
        let second = integrate_step(&m, &first, &[1.0], 0.075, 15).unwrap();
        assert_eq!(traj.states[1], first);
        assert_eq!(traj.last(), second.as_slice());
    }

    #[test]
    fn overflow_reports_substep() {
        let m = LinearModel::scalar(1e200, 0.0);
        let err = integrate_step(&m, &[1e200], &[0.0], 1.0, 4).unwrap_err();
        assert!(matches!(err, Error::IntegrationOverflow { substep: 0 }));
    }

    #[test]
    fn grid_spec_validation() {
        let g = GridSpec::new(0.15, 20, 10, 0.005).unwrap();
        assert_eq!(g.substeps_per_fine(), 3);
        assert_eq!(g.substeps_per_coarse(), 30);
        assert_abs_diff_eq!(g.fine_step(), 0.015, epsilon = 1e-16);
        assert_abs_diff_eq!(g.final_time(), 3.0, epsilon = 1e-12);
        for d in [1, 2, 5, 10, 30] {
            assert!(g.with_oversampling(d).is_ok());
        }
        assert!(g.with_oversampling(7).is_err());
        assert!(g.with_oversampling(60).is_err());
        assert!(GridSpec::new(0.0, 20, 1, 0.005).is_err());
    }

    #[test]
    fn registry() {
        let registry = ModelRegistry::with_builtins();
        let model = registry.build("vanderpol", &ModelParams::new()).unwrap();
        assert_eq!(model.state_dim(), 2);
        assert!(matches!(registry.build("pendulum", &ModelParams::new()), Err(Error::UnknownModel(_))));
        let mut params = ModelParams::new();
        params.insert("gravity".into(), 9.81);
        assert!(registry.build("vanderpol", &params).is_err());
    }
}
