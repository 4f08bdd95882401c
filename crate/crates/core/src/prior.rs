//! Fixed hierarchical prior over weights, precisions, and supports, plus its
//! validation rules.
//!
//! Each weight has a precision ρ whose conditional prior is a Gamma picked by
//! the binary support s: a slab Gamma(a, b) with E[ρ] = a/b of order one when
//! s = 1, and a spike Gamma(ā, b̄) with E[ρ] = ā/b̄ ≫ 1 when s = 0. Supports
//! are coupled on a grid through row/column transition matrices (see
//! [`crate::grid`]). Hyperparameters are scalars broadcast to every weight;
//! biases and other non-matrix parameters sit outside this prior and keep a
//! fixed unit Gaussian.

use serde::{Deserialize, Serialize};

use crate::special::ln_gamma;
use crate::{Error, Result};

/// Shape of one layer's weight matrix (rows × cols = weight count).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
}

impl LayerShape {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Domain(format!(
                "layer shape must be positive, got {rows}x{cols}"
            )));
        }
        Ok(Self { rows, cols })
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }
}

/// Hyperparameters of the hierarchical sparse prior.
///
/// `row_transition[i][j]` is p(s_next = j | s_prev = i) along a row, and
/// `col_transition` the analogue down a column. `init_active` is the marginal
/// activation of the first support in the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierPrior {
    pub a: f64,
    pub b: f64,
    pub a_bar: f64,
    pub b_bar: f64,
    pub row_transition: [[f64; 2]; 2],
    pub col_transition: [[f64; 2]; 2],
    pub init_active: f64,
    /// Upper bound enforced on the slab mean a/b.
    #[serde(default = "default_slab_ratio_max")]
    pub slab_ratio_max: f64,
    /// Lower bound enforced on the spike mean ā/b̄.
    #[serde(default = "default_spike_ratio_min")]
    pub spike_ratio_min: f64,
}

fn default_slab_ratio_max() -> f64 {
    10.0
}

fn default_spike_ratio_min() -> f64 {
    100.0
}

/// Assemble a row-stochastic 2×2 transition matrix from its two diagonal
/// probabilities p(0|0) and p(1|1).
pub fn transition_from_diag(p00: f64, p11: f64) -> [[f64; 2]; 2] {
    [[p00, 1.0 - p00], [1.0 - p11, p11]]
}

impl Default for HierPrior {
    fn default() -> Self {
        // Slab mean a/b = 10, spike mean ā/b̄ = 100. Moderate shapes keep
        // both support states reachable as the posterior weight means move,
        // which is what lets the mask refine over rounds instead of freezing
        // after the first update. Diagonal transition probability 0.8 gives
        // expected run lengths of 5 along rows and columns, matching
        // desk-scale cluster sizes while leaving the data evidence in
        // charge of the support decisions.
        Self {
            a: 0.2,
            b: 0.02,
            a_bar: 2.0,
            b_bar: 0.02,
            row_transition: transition_from_diag(0.8, 0.8),
            col_transition: transition_from_diag(0.8, 0.8),
            init_active: 0.5,
            slab_ratio_max: default_slab_ratio_max(),
            spike_ratio_min: default_spike_ratio_min(),
        }
    }
}

impl HierPrior {
    /// Check every invariant, collecting all violations before reporting.
    pub fn validate(self) -> Result<Self> {
        let mut violations = Vec::new();
        for (name, v) in [
            ("a", self.a),
            ("b", self.b),
            ("a_bar", self.a_bar),
            ("b_bar", self.b_bar),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                violations.push(format!("{name} must be positive, got {v}"));
            }
        }
        if violations.is_empty() {
            if self.a / self.b > self.slab_ratio_max {
                violations.push(format!(
                    "a/b above slab bound ({} > {})",
                    self.a / self.b,
                    self.slab_ratio_max
                ));
            }
            if self.a_bar / self.b_bar < self.spike_ratio_min {
                violations.push(format!(
                    "a_bar/b_bar below sparsity bound ({} < {})",
                    self.a_bar / self.b_bar,
                    self.spike_ratio_min
                ));
            }
        }
        for (name, m) in [
            ("row_transition", &self.row_transition),
            ("col_transition", &self.col_transition),
        ] {
            for (i, row) in m.iter().enumerate() {
                if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    violations.push(format!("{name} row {i} has entries outside [0,1]"));
                } else if (row[0] + row[1] - 1.0).abs() > 1e-12 {
                    violations.push(format!(
                        "{name} not row-stochastic (row {i} sums to {})",
                        row[0] + row[1]
                    ));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.init_active) {
            violations.push(format!(
                "init_active must lie in [0,1], got {}",
                self.init_active
            ));
        }
        if violations.is_empty() {
            Ok(self)
        } else {
            Err(Error::Prior(violations))
        }
    }

    /// Log density of the precision prior selected by the support state:
    /// ln Γ(ρ; a, b) when `s` is active, ln Γ(ρ; ā, b̄) otherwise.
    pub fn log_prior_density_rho(&self, rho: f64, s: bool) -> f64 {
        debug_assert!(rho > 0.0);
        let (shape, rate) = if s { (self.a, self.b) } else { (self.a_bar, self.b_bar) };
        shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * rho.ln() - rate * rho
    }
}
