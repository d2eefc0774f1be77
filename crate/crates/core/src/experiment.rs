//! Experiment driver behind the `mimpc` subcommands: single OCP solves,
//! closed loops, the oversampling sweep, the step-width bound and the plot
//! script.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{empirical_margin, estimate_constants, gap_metrics, BoundsReport, SampleBox};
use crate::config::ExperimentConfig;
use crate::dynamics::ModelRegistry;
use crate::error::{Error, Result};
use crate::mpc::{run_closed_loop, ClosedLoopFailure, ClosedLoopLog, Controller, LoopMode};
use crate::nlp::{solve_ocp, WarmStart};
use crate::ocp::{check_terminal_decrease, OcpProblem, OcpSolution, TerminalCheck, TerminalIngredients};
use crate::rounding::theoretical_bounds;

/// A configuration together with the problem it describes.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub problem: OcpProblem,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        Self::with_registry(config, &ModelRegistry::with_builtins())
    }

    pub fn with_registry(config: ExperimentConfig, registry: &ModelRegistry) -> Result<Self> {
        let problem = config.build_problem(registry)?;
        Ok(Experiment { config, problem })
    }

    pub fn controller(&self) -> Controller {
        Controller::new(self.problem.clone(), self.config.solver.clone())
            .with_timing_repeats(self.config.experiment.repeats)
            .with_carried_deficit(self.config.experiment.carry_deficit)
    }

    /// One OCP solve from `x0`, warm-started with the all-`u_f` sequence.
    pub fn solve_once(&self) -> Result<OcpSolution> {
        let warm = WarmStart {
            multipliers: self.problem.reference_sequence(),
            dual: 0.0,
        };
        solve_ocp(&self.problem, &self.config.experiment.x0, Some(&warm), &self.config.solver)
    }

    pub fn closed_loop(&self, mode: LoopMode) -> std::result::Result<ClosedLoopLog, ClosedLoopFailure> {
        run_closed_loop(
            &mut self.controller(),
            mode,
            &self.config.experiment.x0,
            self.config.experiment.steps,
        )
    }

    pub fn rounded_mode(&self, oversample_factor: usize) -> LoopMode {
        LoopMode::Rounded {
            method: self.config.experiment.rounding,
            oversample_factor,
        }
    }

    /// The relaxed loop and one rounded loop per divisor, in parallel.
    pub fn sweep(&self) -> Result<SweepResult> {
        let mut modes = vec![LoopMode::Relaxed];
        modes.extend(self.config.experiment.divisors.iter().map(|&d| self.rounded_mode(d)));
        let logs: Vec<ClosedLoopLog> = modes
            .par_iter()
            .map(|&mode| self.closed_loop(mode).map_err(Error::from))
            .collect::<Result<_>>()?;
        let mut logs = logs.into_iter();
        let relaxed = logs.next().expect("relaxed run");
        let rounded: Vec<(usize, ClosedLoopLog)> = self.config.experiment.divisors.iter().copied().zip(logs).collect();
        let mut rows = Vec::with_capacity(rounded.len());
        for (d, log) in &rounded {
            let metrics = gap_metrics(log)?;
            let fine = self.problem.grid.coarse_step / *d as f64;
            rows.push(SweepRow {
                dt_divisor: *d,
                sigma_max: metrics.sigma_max,
                gamma_max: metrics.gamma_max,
                t_r_percent: metrics.t_r_percent,
                sigma_sur_bound: theoretical_bounds(self.problem.cardinality(), fine, *d).sigma_sur,
            });
        }
        Ok(SweepResult { relaxed, rounded, rows })
    }

    /// Regularity constants over the inflated bounding box of the relaxed
    /// trajectory, and the resulting step-width bound. Uses the configured
    /// `γ`, or the empirical margin of `sweep` when none is configured.
    pub fn bounds(&self, relaxed: &ClosedLoopLog, sweep: Option<&SweepResult>) -> Result<BoundsReport> {
        let region = SampleBox::around(&relaxed.states(), self.config.analysis.box_inflation)?;
        let a = &self.config.analysis;
        let constants = estimate_constants(
            self.problem.model.as_ref(),
            &self.problem.controls,
            &region,
            a.samples,
            self.config.seed,
            a.safety,
        )?;
        let (gamma, empirical) = match (self.config.experiment.gamma, sweep) {
            (Some(g), _) => (g, false),
            (None, Some(s)) => (
                empirical_margin(s.rounded.iter().map(|(_, log)| log))
                    .ok_or_else(|| Error::Precondition("no rounded run stays in its initial sublevel set".into()))?,
                true,
            ),
            (None, None) => return Err(Error::config("experiment.gamma", "required when no sweep is available")),
        };
        Ok(BoundsReport::new(
            constants,
            region,
            a.samples,
            self.config.seed,
            gamma,
            empirical,
            self.problem.grid.coarse_step,
            self.problem.cardinality(),
        ))
    }

    pub fn terminal_check(&self) -> Result<TerminalCheck> {
        check_terminal_decrease(&self.problem, self.config.analysis.terminal_samples, self.config.seed)
    }

    /// Writes the effective configuration and the terminal ingredients.
    pub fn write_setup(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.config.to_toml_string())?;
        std::fs::write(dir.join("terminal.toml"), terminal_toml(&self.problem.terminal))?;
        Ok(())
    }
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub dt_divisor: usize,
    pub sigma_max: f64,
    pub gamma_max: f64,
    pub t_r_percent: f64,
    pub sigma_sur_bound: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub relaxed: ClosedLoopLog,
    /// `(divisor, log)` in configuration order.
    pub rounded: Vec<(usize, ClosedLoopLog)>,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn log_for(&self, divisor: usize) -> Option<&ClosedLoopLog> {
        self.rounded.iter().find(|(d, _)| *d == divisor).map(|(_, l)| l)
    }

    pub fn write_summary(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `summary.csv` plus one per-step and one fine-grid CSV per run.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_summary(std::fs::File::create(dir.join("summary.csv"))?)?;
        self.relaxed.save(dir, "relaxed")?;
        for (d, log) in &self.rounded {
            log.save(dir, &run_stem(*d))?;
        }
        Ok(())
    }
}

/// File stem of the rounded run with divisor `d`.
pub fn run_stem(d: usize) -> String {
    format!("rounded_os{d}")
}

#[derive(Serialize)]
struct TerminalFile {
    level: f64,
    inflation: f64,
    p: Vec<Vec<f64>>,
    gain: Vec<Vec<f64>>,
    steady_state: Vec<f64>,
    reference: Vec<f64>,
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn terminal_toml(t: &TerminalIngredients) -> String {
    let file = TerminalFile {
        level: t.level,
        inflation: t.inflation,
        p: rows(&t.p),
        gain: rows(&t.gain),
        steady_state: t.steady_state.clone(),
        reference: t.reference.weights().to_vec(),
    };
    toml::to_string(&file).expect("terminal data serializes")
}

/// Python/matplotlib script that draws the four report panels from the
/// files written by `sweep`: closed-loop states, `V_N` traces, gap metrics
/// over the divisor, and the binary input on the fine grid.
pub fn plot_script(divisors: &[usize], state_dim: usize) -> String {
    let mut s = String::new();
    let stems: Vec<String> = divisors.iter().map(|&d| format!("{:?}", run_stem(d))).collect();
    let finest = divisors.iter().copied().max().unwrap_or(1);
    writeln!(s, "import csv").unwrap();
    writeln!(s, "import pathlib").unwrap();
    writeln!(s, "import sys").unwrap();
    writeln!(s).unwrap();
    writeln!(s, "import matplotlib").unwrap();
    writeln!(s, "matplotlib.use(\"Agg\")").unwrap();
    writeln!(s, "import matplotlib.pyplot as plt").unwrap();
    writeln!(s).unwrap();
    writeln!(s, "out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else pathlib.Path(__file__).parent)").unwrap();
    writeln!(s, "divisors = {divisors:?}").unwrap();
    writeln!(s, "stems = [{}]", stems.join(", ")).unwrap();
    writeln!(s).unwrap();
    writeln!(s).unwrap();
    writeln!(s, "def load(name):").unwrap();
    writeln!(s, "    with open(out / name) as fh:").unwrap();
    writeln!(s, "        rows = list(csv.DictReader(fh))").unwrap();
    writeln!(s, "    return {{k: [float(r[k]) for r in rows] for k in rows[0]}} if rows else {{}}").unwrap();
    writeln!(s).unwrap();
    writeln!(s).unwrap();
    writeln!(s, "relaxed = load(\"relaxed.csv\")").unwrap();
    writeln!(s, "runs = {{d: load(stem + \".csv\") for d, stem in zip(divisors, stems)}}").unwrap();
    writeln!(s, "summary = load(\"summary.csv\")").unwrap();
    writeln!(s, "fine = load({:?})", format!("{}_fine.csv", run_stem(finest))).unwrap();
    writeln!(s).unwrap();
    writeln!(s, "fig, ax = plt.subplots(2, 2, figsize=(11, 8))").unwrap();
    for i in 1..=state_dim {
        writeln!(s, "ax[0, 0].plot(relaxed[\"t\"], relaxed[\"x{i}\"], \"k-\", label=\"relaxed x{i}\")").unwrap();
        writeln!(
            s,
            "ax[0, 0].plot(runs[{finest}][\"t\"], runs[{finest}][\"x{i}\"], \"--\", label=\"rounded x{i}\")"
        )
        .unwrap();
    }
    writeln!(s, "ax[0, 0].set_xlabel(\"t\")").unwrap();
    writeln!(s, "ax[0, 0].legend()").unwrap();
    writeln!(s, "ax[0, 1].semilogy(relaxed[\"t\"], relaxed[\"V_N\"], \"k-\", label=\"relaxed\")").unwrap();
    writeln!(s, "for d in divisors:").unwrap();
    writeln!(s, "    ax[0, 1].semilogy(runs[d][\"t\"], runs[d][\"V_N\"], label=f\"N_os = {{d}}\")").unwrap();
    writeln!(s, "ax[0, 1].set_ylabel(\"V_N\")").unwrap();
    writeln!(s, "ax[0, 1].legend()").unwrap();
    writeln!(s, "ax[1, 0].loglog(summary[\"dt_divisor\"], summary[\"sigma_max\"], \"o-\", label=\"sigma_max\")").unwrap();
    writeln!(s, "ax[1, 0].loglog(summary[\"dt_divisor\"], summary[\"gamma_max\"], \"s-\", label=\"gamma_max\")").unwrap();
    writeln!(s, "ax[1, 0].loglog(summary[\"dt_divisor\"], summary[\"sigma_sur_bound\"], \"k:\", label=\"SUR bound\")").unwrap();
    writeln!(s, "ax[1, 0].set_xlabel(\"N_os\")").unwrap();
    writeln!(s, "ax[1, 0].legend()").unwrap();
    writeln!(s, "ax[1, 1].step(fine[\"t\"], fine[\"omega_index\"], where=\"post\")").unwrap();
    writeln!(s, "ax[1, 1].set_xlabel(\"t\")").unwrap();
    writeln!(s, "ax[1, 1].set_ylabel(\"active index (N_os = {finest})\")").unwrap();
    writeln!(s, "fig.tight_layout()").unwrap();
    writeln!(s, "fig.savefig(out / \"report.png\", dpi=150)").unwrap();
    s
}
