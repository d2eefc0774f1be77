//! Relaxed and rounded closed loops.
//!
//! At every sampling instant the controller solves the relaxed OCP from the
//! measured state, keeps the first multiplier `μ`, and either applies it
//! directly (relaxed loop) or rounds it to a binary sequence on the
//! oversampling grid and simulates the plant under that sequence (rounded
//! loop).

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::convexification::SimplexVector;
use crate::dynamics::simulate_with_substep;
use crate::error::{check_dim, Error, Result};
use crate::nlp::{solve_ocp, SolverSettings, WarmStart};
use crate::ocp::{evaluate_cost, OcpProblem, OcpSolution, TerminalIngredients};
use crate::rounding::{round, sum_up_rounding_with_carry, RoundingMethod, RoundingResult};

/// Which input reaches the plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopMode {
    Relaxed,
    Rounded {
        method: RoundingMethod,
        oversample_factor: usize,
    },
}

impl fmt::Display for LoopMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoopMode::Relaxed => f.write_str("relaxed"),
            LoopMode::Rounded {
                method,
                oversample_factor,
            } => write!(f, "{method}-os{oversample_factor}"),
        }
    }
}

/// `[u₁*, …, u_{N−1}*, κ_f(x_N)]` with `x_N` the predicted terminal state.
pub fn warm_start_shift(prev: &OcpSolution, terminal: &TerminalIngredients) -> Vec<SimplexVector> {
    let mut next: Vec<SimplexVector> = prev.multipliers.iter().skip(1).cloned().collect();
    let x_n = prev.states.last().expect("solutions carry the predicted states");
    next.push(terminal.control_law(x_n));
    next
}

/// Outcome of one relaxed MPC step.
#[derive(Debug, Clone)]
pub struct RelaxedStep {
    pub solution: OcpSolution,
    /// `J_N` of the warm start at the measured state.
    pub warm_cost: f64,
    /// `F(x)μ`
    pub next: Vec<f64>,
    /// Minimum solve time over the timing repeats.
    pub solve_time: Duration,
}

impl RelaxedStep {
    pub fn multiplier(&self) -> &SimplexVector {
        &self.solution.multipliers[0]
    }

    /// `V_N(x)`
    pub fn value(&self) -> f64 {
        self.solution.cost
    }
}

/// Outcome of one rounded MPC step.
#[derive(Debug, Clone)]
pub struct RoundedStep {
    pub relaxed: RelaxedStep,
    pub rounding: RoundingResult,
    /// State reached under the binary sequence.
    pub next: Vec<f64>,
    /// `‖x̌⁺ − F(x)μ‖`
    pub gamma: f64,
    pub round_time: Duration,
}

/// Receding-horizon controller holding the warm start between steps.
#[derive(Debug, Clone)]
pub struct Controller {
    problem: OcpProblem,
    settings: SolverSettings,
    warm: WarmStart,
    repeats: usize,
    carry_deficit: bool,
    deficit: Vec<f64>,
}

impl Controller {
    /// A controller whose first warm start is the all-`u_f` sequence.
    pub fn new(problem: OcpProblem, settings: SolverSettings) -> Self {
        let warm = WarmStart {
            multipliers: problem.reference_sequence(),
            dual: 0.0,
        };
        let deficit = vec![0.0; problem.cardinality()];
        Controller {
            problem,
            settings,
            warm,
            repeats: 1,
            carry_deficit: false,
            deficit,
        }
    }

    /// Times each solve and rounding `repeats` times and keeps the minimum.
    pub fn with_timing_repeats(mut self, repeats: usize) -> Self {
        self.repeats = repeats.max(1);
        self
    }

    /// Carries the SUR deficit across coarse intervals instead of resetting it.
    pub fn with_carried_deficit(mut self, carry: bool) -> Self {
        self.carry_deficit = carry;
        self
    }

    pub fn problem(&self) -> &OcpProblem {
        &self.problem
    }

    pub fn warm_start(&self) -> &WarmStart {
        &self.warm
    }

    /// Solves from `x`, then shifts the warm start for the next step.
    pub fn relaxed_step(&mut self, x: &[f64]) -> Result<RelaxedStep> {
        check_dim("state", self.problem.state_dim(), x.len())?;
        let (warm_cost, _) = evaluate_cost(&self.problem, x, &self.warm.multipliers)?;
        let mut best = Duration::MAX;
        let mut solution = None;
        for _ in 0..self.repeats {
            let started = Instant::now();
            let sol = solve_ocp(&self.problem, x, Some(&self.warm), &self.settings)?;
            best = best.min(started.elapsed());
            solution.get_or_insert(sol);
        }
        let solution = solution.expect("at least one repeat");
        self.warm = WarmStart {
            multipliers: warm_start_shift(&solution, &self.problem.terminal),
            dual: solution.diagnostics.dual,
        };
        let next = solution.states[1].clone();
        Ok(RelaxedStep {
            solution,
            warm_cost,
            next,
            solve_time: best,
        })
    }

    /// Relaxed step followed by rounding `μ` onto `oversample_factor` fine
    /// intervals and simulating the plant under the binary sequence.
    pub fn rounded_step(&mut self, x: &[f64], method: RoundingMethod, oversample_factor: usize) -> Result<RoundedStep> {
        let grid = self.problem.grid.with_oversampling(oversample_factor)?;
        let relaxed = self.relaxed_step(x)?;
        let mu = relaxed.multiplier().clone();
        let fine_step = grid.fine_step();
        let mut best = Duration::MAX;
        let mut rounding = None;
        for _ in 0..self.repeats {
            let mut deficit = self.deficit.clone();
            let started = Instant::now();
            let r = if self.carry_deficit && method == RoundingMethod::Sur {
                sum_up_rounding_with_carry(&mu, oversample_factor, fine_step, &mut deficit)
            } else {
                round(method, &mu, oversample_factor, fine_step)
            };
            best = best.min(started.elapsed());
            if rounding.is_none() {
                rounding = Some(r);
                if self.carry_deficit {
                    self.deficit = deficit;
                }
            }
        }
        let rounding = rounding.expect("at least one repeat");
        let traj = simulate_with_substep(
            self.problem.model.as_ref(),
            &self.problem.controls,
            x,
            &rounding.omega,
            grid.substep_len(),
            grid.substeps_per_fine(),
        )?;
        let next = traj.last().to_vec();
        let gamma = next
            .iter()
            .zip(&relaxed.next)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        Ok(RoundedStep {
            relaxed,
            rounding,
            next,
            gamma,
            round_time: best,
        })
    }
}

/// One row of the closed-loop log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub state: Vec<f64>,
    /// `V_N(x_n)`
    pub value: f64,
    /// `J_N` of the warm start at `x_n`.
    pub warm_cost: f64,
    /// `ℓ(x_n, μ_n)`
    pub stage_cost: f64,
    pub multiplier: SimplexVector,
    /// Active control index on each fine interval; empty in the relaxed loop.
    pub omega: Vec<usize>,
    pub sigma: f64,
    pub gamma: f64,
    pub solver_iterations: usize,
    pub solve_time: Duration,
    pub round_time: Duration,
}

/// Closed-loop trajectory with per-step diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopLog {
    pub mode: LoopMode,
    pub coarse_step: f64,
    pub records: Vec<StepRecord>,
    /// State after the last completed step.
    pub final_state: Vec<f64>,
    /// `V_N` at `final_state`, when the last solve succeeded.
    pub final_value: Option<f64>,
}

impl ClosedLoopLog {
    fn new(mode: LoopMode, coarse_step: f64, x0: &[f64]) -> Self {
        ClosedLoopLog {
            mode,
            coarse_step,
            records: Vec::new(),
            final_state: x0.to_vec(),
            final_value: None,
        }
    }

    /// `V_N(x_0), …, V_N(x_steps)`, including the final value if present.
    pub fn value_trace(&self) -> Vec<f64> {
        let mut trace: Vec<f64> = self.records.iter().map(|r| r.value).collect();
        trace.extend(self.final_value);
        trace
    }

    pub fn states(&self) -> Vec<Vec<f64>> {
        let mut states: Vec<Vec<f64>> = self.records.iter().map(|r| r.state.clone()).collect();
        states.push(self.final_state.clone());
        states
    }

    pub fn sigma_max(&self) -> f64 {
        self.records.iter().map(|r| r.sigma).fold(0.0, f64::max)
    }

    pub fn gamma_max(&self) -> f64 {
        self.records.iter().map(|r| r.gamma).fold(0.0, f64::max)
    }

    /// Writes the per-step CSV. Columns: `step, t, x1…xn, V_N, J_N, u_1…u_m,
    /// sigma_step, gamma_step, solver_iters, solve_ms, round_us`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.final_state.len();
        let m = self.records.first().map_or(0, |r| r.multiplier.len());
        let mut header = vec!["step".to_string(), "t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend(["V_N".to_string(), "J_N".to_string()]);
        header.extend((1..=m).map(|i| format!("u_{i}")));
        header.extend(["sigma_step", "gamma_step", "solver_iters", "solve_ms", "round_us"].map(String::from));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.step.to_string(), r.time.to_string()];
            row.extend(r.state.iter().map(f64::to_string));
            row.extend([r.value.to_string(), r.warm_cost.to_string()]);
            row.extend(r.multiplier.weights().iter().map(f64::to_string));
            row.extend([
                r.sigma.to_string(),
                r.gamma.to_string(),
                r.solver_iterations.to_string(),
                (r.solve_time.as_secs_f64() * 1e3).to_string(),
                (r.round_time.as_secs_f64() * 1e6).to_string(),
            ]);
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the binary sequence on the fine grid. Columns: `m, t, omega_index`.
    pub fn write_fine_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["m", "t", "omega_index"])?;
        let mut m = 0usize;
        for r in &self.records {
            let fine = self.coarse_step / r.omega.len().max(1) as f64;
            for (j, idx) in r.omega.iter().enumerate() {
                let t = r.time + j as f64 * fine;
                w.write_record([m.to_string(), t.to_string(), idx.to_string()])?;
                m += 1;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        if matches!(self.mode, LoopMode::Rounded { .. }) {
            self.write_fine_csv(std::fs::File::create(dir.join(format!("{stem}_fine.csv")))?)?;
        }
        Ok(())
    }
}

/// A closed loop that stopped early. The log holds every completed step.
#[derive(Debug)]
pub struct ClosedLoopFailure {
    pub log: Box<ClosedLoopLog>,
    pub error: Error,
}

impl fmt::Display for ClosedLoopFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for ClosedLoopFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<ClosedLoopFailure> for Error {
    fn from(f: ClosedLoopFailure) -> Self {
        f.error
    }
}

/// Runs `steps` closed-loop steps from `x0`.
pub fn run_closed_loop(
    controller: &mut Controller,
    mode: LoopMode,
    x0: &[f64],
    steps: usize,
) -> std::result::Result<ClosedLoopLog, ClosedLoopFailure> {
    let coarse_step = controller.problem().grid.coarse_step;
    let mut log = ClosedLoopLog::new(mode, coarse_step, x0);
    let mut x = x0.to_vec();
    for step in 0..steps {
        let outcome = match mode {
            LoopMode::Relaxed => controller.relaxed_step(&x).map(|r| {
                let next = r.next.clone();
                (r, None, next, 0.0, Duration::ZERO)
            }),
            LoopMode::Rounded {
                method,
                oversample_factor,
            } => controller
                .rounded_step(&x, method, oversample_factor)
                .map(|r| (r.relaxed, Some(r.rounding), r.next, r.gamma, r.round_time)),
        };
        let (relaxed, rounding, next, gamma, round_time) = match outcome {
            Ok(o) => o,
            Err(error) => {
                return Err(ClosedLoopFailure {
                    log: Box::new(log),
                    error: error.at_step(step),
                })
            }
        };
        let mu = relaxed.multiplier().clone();
        log.records.push(StepRecord {
            step,
            time: step as f64 * coarse_step,
            stage_cost: controller.problem().stage_cost(&x, &mu),
            state: std::mem::replace(&mut x, next),
            value: relaxed.value(),
            warm_cost: relaxed.warm_cost,
            multiplier: mu,
            omega: rounding.as_ref().map(RoundingResult::active_indices).unwrap_or_default(),
            sigma: rounding.as_ref().map_or(0.0, |r| r.sigma),
            gamma,
            solver_iterations: relaxed.solution.diagnostics.iterations,
            solve_time: relaxed.solve_time,
            round_time,
        });
        log.final_state.clone_from(&x);
    }
    // V_N at the final state, without disturbing the controller.
    let mut probe = controller.clone().with_timing_repeats(1);
    log.final_value = probe.relaxed_step(&x).ok().map(|r| r.value());
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convexification::{ControlSet, CostKind, CostVariant};
    use crate::dynamics::{convexified_map, simulate_oversampled, GridSpec, OdeModel, VanDerPol};
    use nalgebra::DMatrix;
    use std::sync::Arc;

    fn controller(horizon: usize) -> Controller {
        let model: Arc<dyn OdeModel> = Arc::new(VanDerPol::default());
        let controls = ControlSet::with_input_cost(vec![vec![-1.0], vec![1.0]], |v| v[0] * v[0]).unwrap();
        let reference = SimplexVector::uniform(2);
        let grid = GridSpec::new(0.15, horizon, 1, 0.005).unwrap();
        let q = DMatrix::identity(2, 2);
        let terminal =
            TerminalIngredients::from_linearization(model.as_ref(), &controls, &[0.0, 0.0], &reference, &grid, &q, 0.3, 1.001)
                .unwrap();
        let problem = OcpProblem {
            model,
            controls,
            cost: CostVariant::new(CostKind::Quadratic, reference),
            state_weight: q,
            terminal,
            grid,
        };
        Controller::new(problem, SolverSettings::default())
    }

    #[test]
    fn shift_appends_terminal_law() {
        let c = controller(3);
        let u = |a: f64| SimplexVector::new(vec![a, 1.0 - a]).unwrap();
        let sol = OcpSolution {
            multipliers: vec![u(0.1), u(0.2), u(0.3)],
            states: vec![vec![0.0, 0.0]; 4],
            cost: 0.0,
            terminal_value: 0.0,
            diagnostics: Default::default(),
        };
        let shifted = warm_start_shift(&sol, &c.problem().terminal);
        assert_eq!(shifted, vec![u(0.2), u(0.3), u(0.5)]);
    }

    #[test]
    fn relaxed_step_applies_first_multiplier() {
        let mut c = controller(20);
        let x = [0.5, 0.0];
        let step = c.relaxed_step(&x).unwrap();
        let expected = convexified_map(c.problem().model.as_ref(), &c.problem().controls, &x, step.multiplier(), 0.15, 30).unwrap();
        assert_eq!(step.next, expected);
        assert_eq!(c.warm_start().multipliers.len(), 20);
        assert_eq!(c.warm_start().multipliers[..19], step.solution.multipliers[1..]);
    }

    #[test]
    fn rounded_step_with_one_fine_interval() {
        let mut c = controller(20);
        let x = [0.5, 0.0];
        let step = c.rounded_step(&x, RoundingMethod::Sur, 1).unwrap();
        let j = step.relaxed.multiplier().argmax();
        assert_eq!(step.rounding.active_indices(), vec![j]);
        let plant = simulate_oversampled(
            c.problem().model.as_ref(),
            &c.problem().controls,
            &x,
            &[SimplexVector::unit(2, j)],
            0.15,
            30,
        )
        .unwrap();
        assert_eq!(step.next, plant.last());
    }

    #[test]
    fn binary_multiplier_gives_zero_gamma() {
        // At the origin every solve returns u_f; make u_f binary by rounding a unit multiplier directly.
        let c = controller(1);
        let p = c.problem();
        let unit = SimplexVector::unit(2, 1);
        let coarse = convexified_map(p.model.as_ref(), &p.controls, &[0.2, 0.1], &unit, 0.15, 30).unwrap();
        let grid = p.grid.with_oversampling(5).unwrap();
        let fine = simulate_with_substep(
            p.model.as_ref(),
            &p.controls,
            &[0.2, 0.1],
            &vec![unit; 5],
            grid.substep_len(),
            grid.substeps_per_fine(),
        )
        .unwrap();
        assert_eq!(fine.last(), coarse.as_slice());
    }

    #[test]
    fn short_closed_loop_logs_every_step() {
        let mut c = controller(10);
        let mode = LoopMode::Rounded {
            method: RoundingMethod::Sur,
            oversample_factor: 5,
        };
        let log = run_closed_loop(&mut c, mode, &[0.5, 0.0], 4).unwrap();
        assert_eq!(log.records.len(), 4);
        assert!(log.final_value.is_some());
        for (k, r) in log.records.iter().enumerate() {
            assert_eq!(r.step, k);
            assert_eq!(r.omega.len(), 5);
            assert!(r.sigma <= 0.5 * 2f64.sqrt() * 0.03 + 1e-12);
        }
        let mut csv = Vec::new();
        log.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("step,t,x1,x2,V_N,J_N,u_1,u_2,sigma_step,gamma_step,solver_iters,solve_ms,round_us\n"));
        assert_eq!(text.lines().count(), 5);
        let mut fine = Vec::new();
        log.write_fine_csv(&mut fine).unwrap();
        assert_eq!(String::from_utf8(fine).unwrap().lines().count(), 21);
    }

    #[test]
    fn failure_keeps_partial_log() {
        let mut c = controller(5);
        let err = run_closed_loop(&mut c, LoopMode::Relaxed, &[f64::NAN, 0.0], 3).unwrap_err();
        assert!(err.log.records.is_empty());
        assert!(matches!(err.error, Error::Step { step: 0, .. }));
    }
}
