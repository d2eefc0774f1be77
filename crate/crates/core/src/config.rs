//! TOML experiment configuration. Every field has the benchmark value as its
//! default, so an empty file describes the Van der Pol experiment.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::convexification::{ControlSet, CostKind, CostVariant, SimplexVector};
use crate::dynamics::{GridSpec, ModelParams, ModelRegistry};
use crate::error::{Error, Result};
use crate::nlp::SolverSettings;
use crate::ocp::{OcpProblem, TerminalIngredients};
use crate::rounding::RoundingMethod;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub params: ModelParams,
    /// Steady state `x_f`; the model's own steady state when absent.
    pub steady_state: Option<Vec<f64>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            name: "vanderpol".into(),
            params: ModelParams::new(),
            steady_state: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlsConfig {
    /// The control values `Ω`, one row per element.
    pub values: Vec<Vec<f64>>,
    /// Input cost of each element (`R`). Defaults to `‖vⁱ‖²`.
    pub cost_row: Option<Vec<f64>>,
}

impl Default for ControlsConfig {
    fn default() -> Self {
        ControlsConfig {
            values: vec![vec![-1.0], vec![1.0]],
            cost_row: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub kind: CostKind,
    /// Reference multiplier `u_f`.
    pub reference: Vec<f64>,
    /// State weight `Q`, row by row.
    pub state_weight: Vec<Vec<f64>>,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            kind: CostKind::Quadratic,
            reference: vec![0.5, 0.5],
            state_weight: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub coarse_step: f64,
    pub horizon: usize,
    pub integration_substep: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            coarse_step: 0.15,
            horizon: 20,
            integration_substep: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerminalConfig {
    /// Terminal level `π`.
    pub level: f64,
    /// Cost inflation `ϱ`.
    pub inflation: f64,
}

impl Default for TerminalConfig {
    fn default() -> Self {
        TerminalConfig {
            level: 0.3,
            inflation: 1.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub x0: Vec<f64>,
    pub steps: usize,
    /// Oversampling factors swept by `sweep`.
    pub divisors: Vec<usize>,
    pub rounding: RoundingMethod,
    /// Timing repeats per step; the minimum is logged.
    pub repeats: usize,
    /// Carry the SUR deficit across coarse intervals.
    pub carry_deficit: bool,
    /// Stability margin `γ` for `bounds`; estimated from the sweep when absent.
    pub gamma: Option<f64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            x0: vec![0.5, 0.0],
            steps: 120,
            divisors: vec![1, 2, 5, 10, 30],
            rounding: RoundingMethod::Sur,
            repeats: 5,
            carry_deficit: false,
            gamma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Samples for the regularity constants.
    pub samples: usize,
    pub safety: f64,
    /// Relative inflation of the trajectory bounding box.
    pub box_inflation: f64,
    /// Samples for the terminal decrease check.
    pub terminal_samples: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            samples: 10_000,
            safety: 1.1,
            box_inflation: 0.2,
            terminal_samples: 1000,
        }
    }
}

/// Complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub controls: ControlsConfig,
    pub cost: CostConfig,
    pub grid: GridConfig,
    pub terminal: TerminalConfig,
    pub experiment: ExperimentSection,
    pub solver: SolverSettings,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            output_dir: PathBuf::from("out"),
            model: ModelConfig::default(),
            controls: ControlsConfig::default(),
            cost: CostConfig::default(),
            grid: GridConfig::default(),
            terminal: TerminalConfig::default(),
            experiment: ExperimentSection::default(),
            solver: SolverSettings::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

fn matrix(rows: &[Vec<f64>], path: &str, n: usize) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::config(path, format!("must be a {n}×{n} matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("<toml>", e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        toml::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks the scalar fields that the problem builder does not reach.
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        let e = &self.experiment;
        if e.divisors.is_empty() {
            return Err(Error::config("experiment.divisors", "must not be empty"));
        }
        if let Some(i) = e.divisors.iter().position(|&d| d == 0) {
            return Err(Error::config(format!("experiment.divisors[{i}]"), "must be at least 1"));
        }
        if e.repeats == 0 {
            return Err(Error::config("experiment.repeats", "must be at least 1"));
        }
        if let Some(g) = e.gamma {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::config("experiment.gamma", "must be positive"));
            }
        }
        if !e.x0.iter().all(|v| v.is_finite()) {
            return Err(Error::config("experiment.x0", "must be finite"));
        }
        if self.grid.horizon == 0 {
            return Err(Error::config("grid.horizon", "must be at least 1"));
        }
        let a = &self.analysis;
        if a.samples < 100 {
            return Err(Error::config("analysis.samples", "must be at least 100"));
        }
        if !(a.safety >= 1.0) {
            return Err(Error::config("analysis.safety", "must be at least 1"));
        }
        if !(a.box_inflation >= 0.0) {
            return Err(Error::config("analysis.box_inflation", "must be nonnegative"));
        }
        let grid = self.grid_spec()?;
        for (i, &d) in e.divisors.iter().enumerate() {
            grid.with_oversampling(d)
                .map_err(|_| Error::config(format!("experiment.divisors[{i}]"), "integration substep does not divide the fine step"))?;
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid.coarse_step, self.grid.horizon, 1, self.grid.integration_substep)
    }

    pub fn control_set(&self) -> Result<ControlSet> {
        let values = self.controls.values.clone();
        let row = match &self.controls.cost_row {
            Some(row) => row.clone(),
            None => values.iter().map(|v| v.iter().map(|a| a * a).sum()).collect(),
        };
        ControlSet::new(values, row).map_err(|e| Error::config("controls", e.to_string()))
    }

    /// Builds the model, controls, cost and terminal ingredients.
    pub fn build_problem(&self, registry: &ModelRegistry) -> Result<OcpProblem> {
        self.validate()?;
        let model = registry.build(&self.model.name, &self.model.params)?;
        let n = model.state_dim();
        let controls = self.control_set()?;
        if controls.input_dim() != model.input_dim() {
            return Err(Error::config(
                "controls.values",
                format!("control values have dimension {}, model expects {}", controls.input_dim(), model.input_dim()),
            ));
        }
        if self.experiment.x0.len() != n {
            return Err(Error::config("experiment.x0", format!("must have {n} entries")));
        }
        let reference = SimplexVector::new(self.cost.reference.clone())
            .map_err(|e| Error::config("cost.reference", e.to_string()))?;
        if reference.len() != controls.len() {
            return Err(Error::config("cost.reference", format!("must have {} entries", controls.len())));
        }
        let q = matrix(&self.cost.state_weight, "cost.state_weight", n)?;
        if q.clone().symmetric_eigen().eigenvalues.min() <= 0.0 || (q.clone() - q.transpose()).norm() > 0.0 {
            return Err(Error::config("cost.state_weight", "must be symmetric positive definite"));
        }
        let steady_state = match &self.model.steady_state {
            Some(x) => x.clone(),
            None => model
                .steady_state()
                .map(|(x, _)| x)
                .ok_or_else(|| Error::config("model.steady_state", "required for this model"))?,
        };
        if steady_state.len() != n {
            return Err(Error::config("model.steady_state", format!("must have {n} entries")));
        }
        let grid = self.grid_spec()?;
        let terminal = TerminalIngredients::from_linearization(
            model.as_ref(),
            &controls,
            &steady_state,
            &reference,
            &grid,
            &q,
            self.terminal.level,
            self.terminal.inflation,
        )?;
        Ok(OcpProblem {
            model,
            controls,
            cost: CostVariant::new(self.cost.kind, reference),
            state_weight: q,
            terminal,
            grid,
        })
    }
}
