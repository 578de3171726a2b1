use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{generate_population, rows_of, square, CostSpec, DgpConfig};
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::estimators::{fit_lasso, fit_ols, fit_ridge, fit_strategy_robust, FitConfig, OptimizerConfig, PenaltyKind};
use crate::model::{counterfactual_loss, CostModel, DecisionRule, Population};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// 1/γ: the inverse-cost matrix is divided by the grid value.
    GlobalInverseGaming,
    /// Cost of manipulating the second behavior, C₂₂.
    #[serde(rename = "alpha_22")]
    Alpha22,
    /// Cost interaction C₁₂ = C₂₁.
    #[serde(rename = "alpha_12")]
    Alpha12,
    /// Penalty weight of the penalized estimators.
    Lambda,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::GlobalInverseGaming => "global_inverse_gaming",
            SweepAxis::Alpha22 => "alpha_22",
            SweepAxis::Alpha12 => "alpha_12",
            SweepAxis::Lambda => "lambda",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepEstimator {
    Ols,
    Ridge,
    Lasso,
    Stable,
    StableRidge,
    StableLasso,
}

impl SweepEstimator {
    pub fn name(self) -> &'static str {
        match self {
            SweepEstimator::Ols => "ols",
            SweepEstimator::Ridge => "ridge",
            SweepEstimator::Lasso => "lasso",
            SweepEstimator::Stable => "stable",
            SweepEstimator::StableRidge => "stable_ridge",
            SweepEstimator::StableLasso => "stable_lasso",
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub dgp: DgpConfig,
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    pub estimators: Vec<SweepEstimator>,
    /// Penalty weight when the axis is not `lambda`.
    #[serde(default)]
    pub lambda: f64,
    /// 1/γ when the axis is not `global_inverse_gaming`.
    #[serde(default = "one")]
    pub inverse_gaming: f64,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidInput("sweep grid is empty".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidInput("no estimators to sweep".into()));
        }
        if self.grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("sweep grid values must be finite".into()));
        }
        if !(self.inverse_gaming > 0.0) {
            return Err(Error::InvalidInput("inverse_gaming must be positive".into()));
        }
        if matches!(self.axis, SweepAxis::Alpha12 | SweepAxis::Alpha22) && self.dgp.cost.cost.is_none() {
            return Err(Error::InvalidInput("cost-entry sweeps need the DGP cost given as `cost`".into()));
        }
        if self.dgp.dim() < 2 && matches!(self.axis, SweepAxis::Alpha12 | SweepAxis::Alpha22) {
            return Err(Error::InvalidInput("cost-entry sweeps need at least two behaviors".into()));
        }
        self.dgp.validate()
    }

    /// The cost model at one grid point.
    pub fn costs_at(&self, value: f64) -> Result<CostModel> {
        let mut spec = self.dgp.cost.clone();
        let mut inverse_gaming = self.inverse_gaming;
        match self.axis {
            SweepAxis::GlobalInverseGaming => inverse_gaming = value,
            SweepAxis::Alpha22 | SweepAxis::Alpha12 => {
                let mut c = square(spec.cost.as_ref().expect("validated"), "cost")?;
                if self.axis == SweepAxis::Alpha22 {
                    c[(1, 1)] = value;
                } else {
                    c[(0, 1)] = value;
                    c[(1, 0)] = value;
                }
                spec = CostSpec::from_cost(rows_of(&c));
            }
            SweepAxis::Lambda => {}
        }
        if !(inverse_gaming > 0.0) {
            return Err(Error::InvalidInput(format!("1/γ must be positive, got {inverse_gaming}")));
        }
        spec.to_model()?.scaled(1.0 / inverse_gaming)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub estimator: SweepEstimator,
    /// Intercept first.
    pub coefficients: Vec<f64>,
    /// Loss on a fresh draw that best-responds to the rule.
    pub loss_oos: f64,
}

fn fit_one(est: SweepEstimator, pop: &Population, costs: &CostModel, lambda: f64, seed: u64) -> Result<DecisionRule> {
    let stable = |penalty| {
        let cfg = FitConfig {
            penalty,
            lambda,
            optimizer: OptimizerConfig {
                seed,
                ..OptimizerConfig::default()
            },
            ..FitConfig::default()
        };
        fit_strategy_robust(pop, costs, &cfg).map(|r| r.rule)
    };
    match est {
        SweepEstimator::Ols => fit_ols(pop).map(|r| r.rule),
        SweepEstimator::Ridge => fit_ridge(pop, lambda).map(|r| r.rule),
        SweepEstimator::Lasso => fit_lasso(pop, lambda).map(|r| r.rule),
        SweepEstimator::Stable => stable(PenaltyKind::None),
        SweepEstimator::StableRidge => stable(PenaltyKind::Ridge),
        SweepEstimator::StableLasso => stable(PenaltyKind::Lasso),
    }
}

/// Fits every estimator at every grid point on one training draw and scores
/// each rule on an independent draw (seed + 1) that best-responds to it.
pub fn comparative_statics_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let train = generate_population(&cfg.dgp)?;
    let test = generate_population(&cfg.dgp.with_seed(cfg.dgp.seed.wrapping_add(1)))?;
    let points: Vec<(f64, SweepEstimator)> = cfg
        .grid
        .iter()
        .flat_map(|&v| cfg.estimators.iter().map(move |&e| (v, e)))
        .collect();
    let rows = points
        .par_iter()
        .map(|&(value, est)| {
            let costs = cfg.costs_at(value)?;
            let lambda = if cfg.axis == SweepAxis::Lambda { value } else { cfg.lambda };
            let rule = fit_one(est, &train, &costs, lambda, cfg.dgp.seed)?;
            Ok(SweepRow {
                axis: cfg.axis,
                value,
                estimator: est,
                coefficients: rule.to_vec(),
                loss_oos: counterfactual_loss(&rule, &test, &costs, true, 0.0)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows)
}

/// Tidy CSV: `axis,value,estimator,coef_index,coef,loss_oos`, one line per
/// coefficient (index 0 is the intercept).
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("axis,value,estimator,coef_index,coef,loss_oos\n");
    for r in rows {
        for (j, c) in r.coefficients.iter().enumerate() {
            out += &format!(
                "{},{},{},{j},{},{}\n",
                r.axis.name(),
                fmt_f64(r.value),
                r.estimator.name(),
                fmt_f64(*c),
                fmt_f64(r.loss_oos)
            );
        }
    }
    out
}
