//! Decision-rule estimators: OLS, ridge, LASSO, and the strategy-robust
//! nonlinear least-squares estimator, plus hyperparameter selection.
//!
//! Penalty scaling: ridge minimizes `MSE + λ Σ θₖ²` and LASSO minimizes
//! `½ MSE + λ Σ |θₖ|`, where `θₖ = βₖ·sdₖ` are slopes on standardized
//! features. The strategy-robust estimator uses the same two conventions so
//! that it nests the naive fits exactly when nobody can manipulate.

mod linear;
mod robust;

pub use linear::{
    cross_validate_lambda, fit_lasso, fit_ols, fit_ridge, lambda_grid, lasso_lambda_max,
    lasso_support_lambda, CvResult,
};
pub use robust::{
    fit_strategy_robust, fit_strategy_robust_restricted, RobustObjective, MAX_ENUMERATED_FEATURES,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecisionRule, Population};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    #[default]
    None,
    Lasso,
    Ridge,
}

impl std::fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PenaltyKind::None => "none",
            PenaltyKind::Lasso => "lasso",
            PenaltyKind::Ridge => "ridge",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5000,
            gradient_tolerance: 1e-9,
            restarts: 5,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::InvalidInput("gradient_tolerance must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidInput("restarts must be at least 1".into()));
        }
        Ok(())
    }

    pub(crate) fn settings(&self) -> crate::optim::Settings {
        crate::optim::Settings {
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct FitConfig {
    pub penalty: PenaltyKind,
    pub lambda: f64,
    pub welfare_weight: f64,
    pub support_limit: Option<usize>,
    pub optimizer: OptimizerConfig,
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidInput(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.welfare_weight >= 0.0) || !self.welfare_weight.is_finite() {
            return Err(Error::InvalidInput(format!(
                "welfare_weight must be finite and >= 0, got {}",
                self.welfare_weight
            )));
        }
        if self.support_limit == Some(0) {
            return Err(Error::InvalidInput("support_limit must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub estimator: String,
    pub rule: DecisionRule,
    /// Unpenalized training loss of the estimator's own criterion: plain MSE
    /// for the naive fits, counterfactual MSE under manipulation for the
    /// strategy-robust fit.
    pub in_sample_loss: f64,
    pub converged: bool,
    pub iterations_used: usize,
    pub objective_value: f64,
    pub config: FitConfig,
    /// Selected feature indices when a support restriction was applied.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub support: Option<Vec<usize>>,
}

/// Column means and (population) standard deviations of the behaviors.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(pop: &Population) -> Self {
        let k = pop.dim();
        let n = pop.len() as f64;
        let mut mean = vec![0.0; k];
        for a in pop.agents() {
            for (m, x) in mean.iter_mut().zip(&a.bliss) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; k];
        for a in pop.agents() {
            for ((v, x), m) in var.iter_mut().zip(&a.bliss).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        // constant columns keep unit scale; their standardized values are all zero
        let sd = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, sd }
    }

    /// Standardized design, N×K.
    pub fn transform(&self, pop: &Population) -> DMatrix<f64> {
        DMatrix::from_fn(pop.len(), pop.dim(), |i, j| {
            (pop.agents()[i].bliss[j] - self.mean[j]) / self.sd[j]
        })
    }

    /// Maps standardized slopes and the outcome mean back to an original-scale rule.
    pub fn to_rule(&self, theta: &[f64], y_mean: f64, label: String) -> Result<DecisionRule> {
        let beta: Vec<f64> = theta.iter().zip(&self.sd).map(|(t, s)| t / s).collect();
        let intercept = y_mean - beta.iter().zip(&self.mean).map(|(b, m)| b * m).sum::<f64>();
        DecisionRule::new(intercept, beta, label)
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
