//! Finite control sets, convex multipliers and stage costs on multipliers.
//!
//! A finite control set `Ω = {v¹, …, vᵐ}` is replaced by a multiplier
//! `u` on the unit simplex: the dynamics become `Σ uᵢ f(x, vⁱ)` and the input
//! cost is expressed through the row `Rᵢ = ℓ_v(vⁱ)`. Binary multipliers (one
//! entry equal to one) are in bijection with the elements of `Ω`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Membership tolerance for the simplex and for the binary predicate.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A finite set of control values with the input cost of each element.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSet {
    values: Vec<Vec<f64>>,
    cost_row: Vec<f64>,
}

impl ControlSet {
    /// Builds a control set from explicit values and their input costs.
    pub fn new(values: Vec<Vec<f64>>, cost_row: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Precondition(format!(
                "a control set needs at least two elements, got {}",
                values.len()
            )));
        }
        if cost_row.len() != values.len() {
            return Err(Error::DimensionMismatch {
                what: "control cost row",
                expected: values.len(),
                found: cost_row.len(),
            });
        }
        let dim = values[0].len();
        if dim == 0 {
            return Err(Error::Precondition("control values must not be empty".into()));
        }
        for (i, v) in values.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "control value",
                    expected: dim,
                    found: v.len(),
                });
            }
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::Precondition(format!("control value {i} is not finite")));
            }
            if values[..i].iter().any(|w| w == v) {
                return Err(Error::Precondition(format!("control value {i} is duplicated")));
            }
        }
        if let Some(r) = cost_row.iter().find(|r| !r.is_finite() || **r < 0.0) {
            return Err(Error::Precondition(format!(
                "input costs must be finite and nonnegative, got {r}"
            )));
        }
        Ok(ControlSet { values, cost_row })
    }

    /// Builds the cost row by evaluating `input_cost` at every value.
    pub fn with_input_cost(values: Vec<Vec<f64>>, input_cost: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let row = values.iter().map(|v| input_cost(v)).collect();
        Self::new(values, row)
    }

    /// Quadratic input cost `ℓ_v(v) = vᵀ R_v v`.
    pub fn with_quadratic_cost(values: Vec<Vec<f64>>, weight: &DMatrix<f64>) -> Result<Self> {
        if let Some(v) = values.first() {
            if weight.nrows() != v.len() || weight.ncols() != v.len() {
                return Err(Error::DimensionMismatch {
                    what: "input weight",
                    expected: v.len(),
                    found: weight.nrows(),
                });
            }
        }
        Self::with_input_cost(values, |v| quadratic_form(weight, v))
    }

    /// Checks that the stored cost row matches `input_cost` at every value.
    pub fn is_consistent_with(&self, input_cost: impl Fn(&[f64]) -> f64) -> bool {
        self.values
            .iter()
            .zip(&self.cost_row)
            .all(|(v, r)| (input_cost(v) - r).abs() <= 1e-12 * r.abs().max(1.0))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn cost_row(&self) -> &[f64] {
        &self.cost_row
    }
}

/// A point of the unit simplex `{u ∈ [0,1]ᵐ : Σ uᵢ = 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexVector {
    weights: Vec<f64>,
}

impl SimplexVector {
    /// Validates `weights` against the simplex within [`SIMPLEX_TOL`], then
    /// clips and renormalizes so the stored weights sum to one.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidMultiplier("empty multiplier".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < -SIMPLEX_TOL || *w > 1.0 + SIMPLEX_TOL) {
            return Err(Error::InvalidMultiplier(format!("{weights:?} has entries outside [0, 1]")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidMultiplier(format!("{weights:?} sums to {sum}")));
        }
        Ok(Self::renormalized(weights))
    }

    fn renormalized(mut weights: Vec<f64>) -> Self {
        for w in weights.iter_mut() {
            *w = w.clamp(0.0, 1.0);
        }
        let sum: f64 = weights.iter().sum();
        if sum != 1.0 {
            for w in weights.iter_mut() {
                *w /= sum;
            }
        }
        SimplexVector { weights }
    }

    /// The unit vector `eʲ` of length `len`.
    pub fn unit(len: usize, j: usize) -> Self {
        assert!(j < len, "unit index {j} out of range for length {len}");
        let mut weights = vec![0.0; len];
        weights[j] = 1.0;
        SimplexVector { weights }
    }

    /// The barycenter `(1/m, …, 1/m)`.
    pub fn uniform(len: usize) -> Self {
        assert!(len > 0);
        SimplexVector {
            weights: vec![1.0 / len as f64; len],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// True when every weight is within [`SIMPLEX_TOL`] of zero or one.
    pub fn is_binary(&self) -> bool {
        self.weights
            .iter()
            .all(|w| w.abs() <= SIMPLEX_TOL || (w - 1.0).abs() <= SIMPLEX_TOL)
    }

    /// Index of the largest weight, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.weights)
    }
}

impl TryFrom<Vec<f64>> for SimplexVector {
    type Error = Error;

    fn try_from(weights: Vec<f64>) -> Result<Self> {
        SimplexVector::new(weights)
    }
}

impl From<SimplexVector> for Vec<f64> {
    fn from(u: SimplexVector) -> Self {
        u.weights
    }
}

/// Lowest index attaining the maximum.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Euclidean projection onto the unit simplex (sort-and-threshold).
pub fn project_simplex(y: &[f64]) -> SimplexVector {
    let mut out = y.to_vec();
    project_simplex_in_place(&mut out);
    SimplexVector { weights: out }
}

pub(crate) fn project_simplex_in_place(y: &mut [f64]) {
    debug_assert!(!y.is_empty());
    debug_assert!(y.iter().all(|v| v.is_finite()), "projecting non-finite {y:?}");
    let mut sorted = y.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut threshold = 0.0;
    for (k, s) in sorted.iter().enumerate() {
        cumulative += s;
        let candidate = (cumulative - 1.0) / (k + 1) as f64;
        if s - candidate > 0.0 {
            threshold = candidate;
        } else {
            break;
        }
    }
    let mut sum = 0.0;
    for v in y.iter_mut() {
        *v = (*v - threshold).max(0.0);
        sum += *v;
    }
    if sum != 1.0 {
        for v in y.iter_mut() {
            *v /= sum;
        }
    }
}

/// Which input cost is charged on the multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    /// `R·u`
    Linear,
    /// `R·|u − u_f|`
    Absolute,
    /// `Σ Rᵢ (uᵢ − u_f,ᵢ)²`
    Quadratic,
}

/// Input cost on multipliers together with its reference multiplier `u_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVariant {
    pub kind: CostKind,
    pub reference: SimplexVector,
}

impl CostVariant {
    pub fn new(kind: CostKind, reference: SimplexVector) -> Self {
        CostVariant { kind, reference }
    }

    /// `ℓ_u(u)` for the cost row `row`.
    pub fn input_cost(&self, row: &[f64], u: &[f64]) -> f64 {
        let uf = self.reference.weights();
        match self.kind {
            CostKind::Linear => row.iter().zip(u).map(|(r, ui)| r * ui).sum(),
            CostKind::Absolute => row
                .iter()
                .zip(u)
                .zip(uf)
                .map(|((r, ui), fi)| r * (ui - fi).abs())
                .sum(),
            CostKind::Quadratic => row
                .iter()
                .zip(u)
                .zip(uf)
                .map(|((r, ui), fi)| r * (ui - fi) * (ui - fi))
                .sum(),
        }
    }

    /// Adds `∂ℓ_u/∂u` to `grad`. The absolute variant uses the subgradient
    /// that is zero at `uᵢ = u_f,ᵢ`.
    pub(crate) fn add_input_cost_gradient(&self, row: &[f64], u: &[f64], grad: &mut [f64]) {
        let uf = self.reference.weights();
        for i in 0..u.len() {
            grad[i] += match self.kind {
                CostKind::Linear => row[i],
                CostKind::Absolute => {
                    let d = u[i] - uf[i];
                    if d > 0.0 {
                        row[i]
                    } else if d < 0.0 {
                        -row[i]
                    } else {
                        0.0
                    }
                }
                CostKind::Quadratic => 2.0 * row[i] * (u[i] - uf[i]),
            };
        }
    }
}

/// `xᵀ W x` for a square weight.
pub fn quadratic_form(weight: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += weight[(i, j)] * x[j];
        }
        acc += x[i] * row;
    }
    acc
}

/// Stage cost `ℓ(x, u) = xᵀQx + ℓ_u(u)`.
pub fn stage_cost(
    ctrl: &ControlSet,
    variant: &CostVariant,
    x: &[f64],
    u: &SimplexVector,
    state_weight: &DMatrix<f64>,
) -> f64 {
    quadratic_form(state_weight, x) + variant.input_cost(ctrl.cost_row(), u.weights())
}

/// The control value selected by a binary multiplier.
pub fn bijection_check<'a>(ctrl: &'a ControlSet, omega: &SimplexVector) -> Result<&'a [f64]> {
    if omega.len() != ctrl.len() {
        return Err(Error::DimensionMismatch {
            what: "multiplier",
            expected: ctrl.len(),
            found: omega.len(),
        });
    }
    if !omega.is_binary() {
        return Err(Error::NotBinary {
            weights: omega.weights().to_vec(),
        });
    }
    Ok(ctrl.value(omega.argmax()))
}
