//! Acceptance criteria for the Van der Pol benchmark.
//!
//! Runs as a plain binary (`harness = false`) so every criterion prints one
//! PASS/FAIL line even when it succeeds:
//!
//! ```text
//! cargo test -p mimpc --test acceptance
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use mimpc::config::ExperimentConfig;
use mimpc::convexification::{project_simplex, ControlSet, CostKind, CostVariant, SimplexVector};
use mimpc::dynamics::{GridSpec, LinearModel, OdeModel};
use mimpc::experiment::{Experiment, SweepResult};
use mimpc::nlp::{gradient_check, solve_ocp, SolverSettings};
use mimpc::ocp::{dare_residual, linearize, OcpProblem, TerminalIngredients};
use mimpc::rounding::{simple_rounding, sum_up_rounding, theoretical_bounds, RoundingMethod};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIGMA_REFERENCE: [f64; 5] = [0.1059, 0.0525, 0.0207, 0.0105, 0.0035];
const GAMMA_REFERENCE: [f64; 5] = [0.1036, 0.0411, 0.0173, 0.0113, 0.0024];
const DIVISORS: [usize; 5] = [1, 2, 5, 10, 30];
const TIMING_COLUMNS: [&str; 3] = ["solve_ms", "round_us", "t_r_percent"];

#[derive(Default)]
struct Report {
    failed: Vec<&'static str>,
}

impl Report {
    fn record(&mut self, id: &'static str, title: &str, pass: bool, detail: String) {
        println!("{} {id} {title}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id);
        }
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> SimplexVector {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let s: f64 = raw.iter().sum();
    SimplexVector::new(raw.iter().map(|v| v / s).collect()).unwrap()
}

fn table_trend(report: &mut Report, sweep: &SweepResult, elapsed: Duration) {
    let sigma: Vec<f64> = sweep.rows.iter().map(|r| r.sigma_max).collect();
    let gamma: Vec<f64> = sweep.rows.iter().map(|r| r.gamma_max).collect();
    let divisors: Vec<usize> = sweep.rows.iter().map(|r| r.dt_divisor).collect();
    let decreasing = sigma.windows(2).all(|w| w[1] < w[0]);
    let within = |value: f64, reference: f64| value <= 2.0 * reference && value >= 0.5 * reference;
    let cells_ok = sigma.iter().zip(SIGMA_REFERENCE).all(|(&v, r)| within(v, r))
        && gamma.iter().zip(GAMMA_REFERENCE).all(|(&v, r)| within(v, r));
    let fine_gap = gamma[4] <= 0.01;
    let fast = elapsed <= Duration::from_secs(300);
    report.record(
        "C1",
        "oversampling trend",
        divisors == DIVISORS && decreasing && cells_ok && fine_gap && fast,
        format!(
            "sigma_max {sigma:.4?} gamma_max {gamma:.4?} (within factor 2 of reference: {cells_ok}, \
             sigma strictly decreasing: {decreasing}, gamma_max(30) <= 0.01: {fine_gap}), sweep took {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn sur_bound(report: &mut Report, sweep: &SweepResult) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..10_000 {
        let card = rng.random_range(2..=6);
        let n_os = rng.random_range(1..=64);
        let dt = rng.random_range(1e-3..0.2);
        let u = random_simplex(&mut rng, card);
        let r = sum_up_rounding(&u, n_os, dt);
        worst_ratio = worst_ratio.max(r.sigma / theoretical_bounds(card, dt, n_os).sigma_sur);
    }
    let benchmark = sweep.rows.iter().map(|r| r.sigma_max).fold(0.0, f64::max);
    report.record(
        "C2",
        "sum-up rounding bound",
        worst_ratio <= 1.0 + 1e-12 && benchmark <= 0.10607,
        format!("worst sigma/sigma_SUR over 10^4 cases {worst_ratio:.9}, benchmark sigma_max {benchmark:.5} (<= 0.10607)"),
    );
}

fn relaxed_decrease(report: &mut Report, sweep: &SweepResult) {
    let log = &sweep.relaxed;
    let trace = log.value_trace();
    let mut worst = f64::NEG_INFINITY;
    for (n, r) in log.records.iter().enumerate() {
        if let Some(next) = trace.get(n + 1) {
            worst = worst.max(next - trace[n] + r.stage_cost);
        }
    }
    let complete = trace.len() == log.records.len() + 1;
    let final_norm = log.final_state.iter().map(|v| v * v).sum::<f64>().sqrt();
    report.record(
        "C3",
        "relaxed Lyapunov decrease",
        complete && worst <= 1e-5 && final_norm <= 1e-2 && log.records.len() == 120,
        format!("max V_N(x+) - V_N(x) + l(x, mu) = {worst:e} (<= 1e-5), |x_120| = {final_norm:e} (<= 1e-2)"),
    );
}

fn practical_stability(report: &mut Report, sweep: &SweepResult) {
    let relaxed = sweep.relaxed.value_trace();
    let v0 = relaxed[0];
    let fine = sweep.log_for(10).expect("divisor 10").value_trace();
    let peak = fine.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let deviation = (20..fine.len().min(relaxed.len()))
        .map(|n| (fine[n] - relaxed[n]).abs())
        .fold(0.0, f64::max);
    let coarse = sweep.log_for(1).expect("divisor 1").value_trace();
    let increases = coarse.windows(2).filter(|w| w[1] > w[0]).count();
    report.record(
        "C4",
        "practical stability",
        peak <= 1.05 * v0 && deviation <= 0.1 * v0 && increases > 0,
        format!(
            "N_os=10: max V_N / V_N(x0) = {:.4} (<= 1.05), max |V_N - V_N relaxed| after step 20 = {:.4} V_N(x0) (<= 0.1); \
             N_os=1: {increases} steps with V_N increase (> 0)",
            peak / v0,
            deviation / v0
        ),
    );
}

/// Euclidean projection onto the simplex by enumerating supports and
/// checking the KKT conditions.
fn projection_oracle(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << n) {
        let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let tau = (support.iter().map(|&i| y[i]).sum::<f64>() - 1.0) / support.len() as f64;
        let mut u = vec![0.0; n];
        let mut ok = true;
        for i in 0..n {
            if mask & (1 << i) != 0 {
                u[i] = y[i] - tau;
                ok &= u[i] >= -1e-15;
            } else {
                ok &= y[i] - tau <= 1e-15;
            }
        }
        if ok {
            let d: f64 = u.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, u));
            }
        }
    }
    best.expect("some support satisfies KKT").1
}

fn scalar_problem(level: f64) -> OcpProblem {
    let model: Arc<dyn OdeModel> = Arc::new(LinearModel::scalar(0.5, 1.0));
    let controls = ControlSet::with_input_cost(vec![vec![-1.0], vec![1.0]], |v| v[0] * v[0]).unwrap();
    let reference = SimplexVector::uniform(2);
    let grid = GridSpec::new(0.1, 1, 1, 0.1).unwrap();
    let q = nalgebra::DMatrix::identity(1, 1);
    let terminal =
        TerminalIngredients::from_linearization(model.as_ref(), &controls, &[0.0], &reference, &grid, &q, level, 1.0).unwrap();
    OcpProblem {
        model,
        controls,
        cost: CostVariant::new(CostKind::Quadratic, reference),
        state_weight: q,
        terminal,
        grid,
    }
}

/// Minimum of the one-step problem by grid search over `u₂` with step 10⁻⁴,
/// with the dynamics written out by hand: one midpoint step of
/// `ẋ = 0.5x + v`, `v = 2u₂ − 1`.
fn one_step_oracle(x0: f64, p: f64, level: f64) -> Option<(f64, f64)> {
    let h = 0.1;
    let mut best: Option<(f64, f64)> = None;
    for k in 0..=10_000 {
        let u2 = k as f64 * 1e-4;
        let v = 2.0 * u2 - 1.0;
        let xm = x0 + 0.5 * h * (0.5 * x0 + v);
        let x1 = x0 + h * (0.5 * xm + v);
        if p * x1 * x1 > level {
            continue;
        }
        let cost = x0 * x0 + 2.0 * (u2 - 0.5) * (u2 - 0.5) + p * x1 * x1;
        if best.is_none_or(|(c, _)| cost < c) {
            best = Some((cost, u2));
        }
    }
    best
}

fn oracle_equivalences(report: &mut Report, exp: &Experiment) {
    let problem = &exp.problem;
    let gradient = gradient_check(problem, &exp.config.experiment.x0, 100, 5).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut projection: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=6);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let oracle = projection_oracle(&y);
        let got = project_simplex(&y);
        for (a, b) in got.weights().iter().zip(&oracle) {
            projection = projection.max((a - b).abs());
        }
    }

    let t = &problem.terminal;
    let (a, b) = linearize(problem.model.as_ref(), &problem.controls, &t.steady_state, &t.reference, &problem.grid).unwrap();
    let dare = dare_residual(&a, &b, &problem.state_weight, &t.input_weight, t.inflation, &t.p);

    let sv = |w: &[f64]| SimplexVector::new(w.to_vec()).unwrap();
    let hand = sum_up_rounding(&sv(&[0.5, 0.5]), 2, 0.075).active_indices() == [0, 1]
        && sum_up_rounding(&sv(&[0.3, 0.7]), 5, 0.03).active_indices() == [1, 0, 1, 1, 0]
        && sum_up_rounding(&sv(&[0.0, 1.0]), 4, 0.1).active_indices() == [1, 1, 1, 1];

    let mut ocp_gap: f64 = 0.0;
    let mut active_seen = false;
    for (x0, tight) in [(1.0, false), (-0.7, false), (0.02, false), (0.05, true), (0.08, true)] {
        let loose = scalar_problem(1e6);
        let p = loose.terminal.p[(0, 0)];
        let (_, free_u2) = one_step_oracle(x0, p, f64::INFINITY).unwrap();
        let level = if tight {
            // Halfway between the smallest reachable terminal value (v = -1 for
            // x0 > 0) and the one of the interior unconstrained optimum.
            let x1 = |v: f64| {
                let xm = x0 + 0.05 * (0.5 * x0 + v);
                x0 + 0.1 * (0.5 * xm + v)
            };
            0.5 * p * (x1(-1.0).powi(2) + x1(2.0 * free_u2 - 1.0).powi(2))
        } else {
            1e6
        };
        let problem = scalar_problem(level);
        let (oracle_cost, oracle_u2) = one_step_oracle(x0, p, level).unwrap();
        active_seen |= tight && (oracle_u2 - free_u2).abs() > 1e-3;
        let sol = solve_ocp(&problem, &[x0], None, &SolverSettings::default()).unwrap();
        ocp_gap = ocp_gap
            .max((sol.cost - oracle_cost).abs())
            .max((sol.multipliers[0].weights()[1] - oracle_u2).abs());
    }

    report.record(
        "C5",
        "oracle equivalences",
        gradient <= 1e-5 && projection <= 1e-12 && dare <= 1e-10 && hand && ocp_gap <= 1e-3 && active_seen,
        format!(
            "adjoint vs differences {gradient:.2e} (<= 1e-5, 100 points); projection vs support enumeration {projection:.1e} \
             (10^3 cases); DARE residual {dare:.1e} (<= 1e-10); SUR hand cases exact: {hand}; one-step OCP vs grid search \
             {ocp_gap:.1e} (<= 1e-3, terminal constraint active in tight cases: {active_seen})"
        ),
    );
}

fn single_interval_rounding(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut same = true;
    let mut binary_fixed = true;
    for _ in 0..10_000 {
        let card = rng.random_range(2..=6);
        let dt = rng.random_range(1e-3..0.2);
        let u = random_simplex(&mut rng, card);
        let sr = simple_rounding(&u, 1, dt);
        let sur = sum_up_rounding(&u, 1, dt);
        same &= sr.omega == sur.omega && sr.sigma == sur.sigma;
        let unit = SimplexVector::unit(card, rng.random_range(0..card));
        let n_os = rng.random_range(1..=64);
        for method in [RoundingMethod::Sr, RoundingMethod::Sur] {
            let r = mimpc::rounding::round(method, &unit, n_os, dt);
            binary_fixed &= r.sigma == 0.0 && r.omega.iter().all(|w| *w == unit);
        }
    }
    report.record(
        "C6",
        "SR and SUR on one fine interval",
        same && binary_fixed,
        format!("identical sequences for N_os = 1: {same}; binary inputs reproduced with sigma = 0: {binary_fixed} (10^4 cases)"),
    );
}

/// CSV contents keyed by file name, with timing columns removed.
fn csv_without_timing(dir: &Path) -> BTreeMap<String, Vec<Vec<String>>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        let mut reader = csv::Reader::from_path(&path).unwrap();
        let headers = reader.headers().unwrap().clone();
        let keep: Vec<usize> = (0..headers.len()).filter(|&i| !TIMING_COLUMNS.contains(&&headers[i])).collect();
        let mut rows = vec![keep.iter().map(|&i| headers[i].to_string()).collect::<Vec<_>>()];
        for rec in reader.records() {
            let rec = rec.unwrap();
            rows.push(keep.iter().map(|&i| rec[i].to_string()).collect());
        }
        out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), rows);
    }
    out
}

fn determinism(report: &mut Report, exp: &Experiment, first: &SweepResult) {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    first.save(a.path()).unwrap();
    let second = exp.sweep().unwrap();
    second.save(b.path()).unwrap();
    let left = csv_without_timing(a.path());
    let right = csv_without_timing(b.path());
    let files = left.len();
    let differing: Vec<&String> = left.keys().filter(|k| left.get(*k) != right.get(*k)).collect();
    report.record(
        "C7",
        "determinism",
        files > 0 && differing.is_empty() && left.len() == right.len(),
        format!("{files} CSV files compared without timing columns, differing: {differing:?}"),
    );
}

fn rounding_cost(report: &mut Report, exp: &Experiment, sweep: &SweepResult) {
    let worst = sweep.rows.iter().map(|r| r.t_r_percent).fold(0.0, f64::max);
    let repeats = exp.config.experiment.repeats;
    report.record(
        "C8",
        "rounding cost",
        worst < 1.0 && repeats >= 5,
        format!("max t_r = {worst:.4}% (< 1%) with {repeats} timing repeats"),
    );
}

fn main() {
    // `cargo test -- --list` and filters pass arguments; this target has a single entry.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let exp = Experiment::new(ExperimentConfig::default()).expect("benchmark configuration");
    let started = Instant::now();
    let sweep = exp.sweep().expect("benchmark sweep");
    let elapsed = started.elapsed();

    let mut report = Report::default();
    table_trend(&mut report, &sweep, elapsed);
    sur_bound(&mut report, &sweep);
    relaxed_decrease(&mut report, &sweep);
    practical_stability(&mut report, &sweep);
    oracle_equivalences(&mut report, &exp);
    single_interval_rounding(&mut report);
    determinism(&mut report, &exp, &sweep);
    rounding_cost(&mut report, &exp, &sweep);

    if report.failed.is_empty() {
        println!("acceptance: all 8 criteria passed");
    } else {
        println!("acceptance: failed {:?}", report.failed);
        std::process::exit(1);
    }
}
