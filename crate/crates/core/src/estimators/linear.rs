use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean, FitConfig, FitReport, PenaltyKind, Standardizer};
use crate::error::{Error, Result};
use crate::model::{counterfactual_loss, CostModel, DecisionRule, Population};

/// Relative size of a QR pivot below which a column counts as collinear.
const RANK_TOLERANCE: f64 = 1e-10;

pub(crate) const CV_GRID_POINTS: usize = 50;
const SUPPORT_PATH_POINTS: usize = 100;
const PATH_RATIO: f64 = 1e-4;

fn plain_mse(rule: &DecisionRule, pop: &Population) -> Result<f64> {
    // any cost model works when manipulation is off
    let costs = CostModel::new(DMatrix::identity(pop.dim(), pop.dim()))?;
    counterfactual_loss(rule, pop, &costs, false, 0.0)
}

fn report(
    estimator: &str,
    rule: DecisionRule,
    pop: &Population,
    objective_value: f64,
    iterations_used: usize,
    config: FitConfig,
) -> Result<FitReport> {
    let in_sample_loss = plain_mse(&rule, pop)?;
    Ok(FitReport {
        estimator: estimator.to_string(),
        rule,
        in_sample_loss,
        converged: true,
        iterations_used,
        objective_value,
        config,
        support: None,
    })
}

/// Least squares of y on (1, x̲) via Householder QR.
pub fn fit_ols(pop: &Population) -> Result<FitReport> {
    let n = pop.len();
    let k = pop.dim();
    if n <= k + 1 {
        return Err(Error::InvalidInput(format!(
            "OLS needs more than K+1 = {} observations, got {n}",
            k + 1
        )));
    }
    let design = DMatrix::from_fn(n, k + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            pop.agents()[i].bliss[j - 1]
        }
    });
    let norms: Vec<f64> = design.column_iter().map(|c| c.norm()).collect();
    let qr = design.qr();
    let r = qr.r();
    let singular: Vec<String> = (0..=k)
        .filter(|&j| r[(j, j)].abs() <= RANK_TOLERANCE * norms[j].max(f64::MIN_POSITIVE))
        .map(|j| {
            if j == 0 {
                "intercept".to_string()
            } else {
                pop.feature_names()[j - 1].clone()
            }
        })
        .collect();
    if !singular.is_empty() {
        return Err(Error::Singular { columns: singular });
    }
    let mut qty = DVector::from_vec(pop.outcomes());
    qr.q_tr_mul(&mut qty);
    let rhs = qty.rows(0, k + 1).into_owned();
    let coef = r
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::Singular { columns: vec!["design".into()] })?;
    crate::error::ensure_finite("OLS coefficients", coef.as_slice())?;
    let rule = DecisionRule::new(coef[0], coef.as_slice()[1..].to_vec(), "ols")?;
    let loss = plain_mse(&rule, pop)?;
    report("ols", rule, pop, loss, 1, FitConfig::default())
}

/// Ridge on standardized slopes: minimizes MSE + λ Σ θₖ².
pub fn fit_ridge(pop: &Population, lambda: f64) -> Result<FitReport> {
    check_lambda(lambda)?;
    let config = FitConfig {
        penalty: PenaltyKind::Ridge,
        lambda,
        ..FitConfig::default()
    };
    if lambda == 0.0 {
        let mut rep = fit_ols(pop)?;
        rep.estimator = "ridge".into();
        rep.rule.label = "ridge".into();
        rep.config = config;
        return Ok(rep);
    }
    let st = Standardizer::fit(pop);
    let z = st.transform(pop);
    let y = pop.outcomes();
    let y_mean = mean(&y);
    let theta = ridge_solve(&z, &y, y_mean, lambda)?;
    let rule = st.to_rule(theta.as_slice(), y_mean, "ridge".into())?;
    let mse = plain_mse(&rule, pop)?;
    let objective = mse + lambda * theta.norm_squared();
    report("ridge", rule, pop, objective, 1, config)
}

fn ridge_solve(z: &DMatrix<f64>, y: &[f64], y_mean: f64, lambda: f64) -> Result<DVector<f64>> {
    let n = z.nrows() as f64;
    let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean));
    let mut gram = z.tr_mul(z) / n;
    for j in 0..gram.nrows() {
        gram[(j, j)] += lambda;
    }
    let rhs = z.tr_mul(&yc) / n;
    gram.cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Singular { columns: vec!["ridge normal equations".into()] })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidInput(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

/// Coordinate descent for ½·mean(yc − Zθ)² + λ‖θ‖₁ on standardized columns.
/// `theta` is used as a warm start and overwritten.
pub(crate) struct LassoCd<'a> {
    z: &'a DMatrix<f64>,
    yc: Vec<f64>,
    col_sq: Vec<f64>,
}

impl<'a> LassoCd<'a> {
    pub fn new(z: &'a DMatrix<f64>, y: &[f64], y_mean: f64) -> Self {
        let n = z.nrows() as f64;
        let col_sq = z.column_iter().map(|c| c.norm_squared() / n).collect();
        Self {
            z,
            yc: y.iter().map(|v| v - y_mean).collect(),
            col_sq,
        }
    }

    /// Smallest λ at which every slope is zero.
    pub fn lambda_max(&self) -> f64 {
        let n = self.z.nrows() as f64;
        self.z
            .column_iter()
            .map(|c| (c.iter().zip(&self.yc).map(|(a, b)| a * b).sum::<f64>() / n).abs())
            .fold(0.0, f64::max)
    }

    /// Returns iterations used, or a non-convergence error.
    pub fn solve(&self, lambda: f64, theta: &mut [f64], max_iterations: usize, tol: f64) -> Result<usize> {
        let n = self.z.nrows();
        let nf = n as f64;
        let k = theta.len();
        let mut resid = self.yc.clone();
        for j in 0..k {
            if theta[j] != 0.0 {
                for (r, zij) in resid.iter_mut().zip(self.z.column(j).iter()) {
                    *r -= zij * theta[j];
                }
            }
        }
        for iter in 1..=max_iterations {
            for j in 0..k {
                if self.col_sq[j] == 0.0 {
                    theta[j] = 0.0;
                    continue;
                }
                let col = self.z.column(j);
                let rho: f64 = col.iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / nf
                    + self.col_sq[j] * theta[j];
                let new = crate::optim::soft_threshold(rho, lambda) / self.col_sq[j];
                let delta = new - theta[j];
                if delta != 0.0 {
                    for (r, zij) in resid.iter_mut().zip(col.iter()) {
                        *r -= zij * delta;
                    }
                    theta[j] = new;
                }
            }
            if self.kkt_violation(lambda, theta, &resid) <= tol {
                return Ok(iter);
            }
        }
        let objective = 0.5 * resid.iter().map(|r| r * r).sum::<f64>() / nf
            + lambda * theta.iter().map(|t| t.abs()).sum::<f64>();
        Err(Error::NonConvergence {
            iterations: max_iterations,
            objective,
            best: theta.to_vec(),
        })
    }

    fn kkt_violation(&self, lambda: f64, theta: &[f64], resid: &[f64]) -> f64 {
        let nf = self.z.nrows() as f64;
        let mut worst = 0.0_f64;
        for (j, &t) in theta.iter().enumerate() {
            if self.col_sq[j] == 0.0 {
                continue;
            }
            let grad = -self.z.column(j).iter().zip(resid).map(|(a, r)| a * r).sum::<f64>() / nf;
            let v = if t != 0.0 {
                (grad + lambda * t.signum()).abs()
            } else {
                (grad.abs() - lambda).max(0.0)
            };
            worst = worst.max(v);
        }
        worst
    }
}

/// LASSO on standardized features: minimizes ½·MSE + λ Σ |θₖ|.
pub fn fit_lasso(pop: &Population, lambda: f64) -> Result<FitReport> {
    fit_lasso_with(pop, lambda, &FitConfig::default())
}

pub(crate) fn fit_lasso_with(pop: &Population, lambda: f64, base: &FitConfig) -> Result<FitReport> {
    check_lambda(lambda)?;
    let config = FitConfig {
        penalty: PenaltyKind::Lasso,
        lambda,
        ..*base
    };
    let st = Standardizer::fit(pop);
    let z = st.transform(pop);
    let y = pop.outcomes();
    let y_mean = mean(&y);
    let cd = LassoCd::new(&z, &y, y_mean);
    let mut theta = vec![0.0; pop.dim()];
    let iters = cd.solve(
        lambda,
        &mut theta,
        config.optimizer.max_iterations,
        config.optimizer.gradient_tolerance,
    )?;
    let rule = st.to_rule(&theta, y_mean, "lasso".into())?;
    let mse = plain_mse(&rule, pop)?;
    let objective = 0.5 * mse + lambda * theta.iter().map(|t| t.abs()).sum::<f64>();
    report("lasso", rule, pop, objective, iters, config)
}

/// The LASSO zero threshold max_k |⟨zₖ, y−ȳ⟩|/N on standardized data.
pub fn lasso_lambda_max(pop: &Population) -> f64 {
    let st = Standardizer::fit(pop);
    let z = st.transform(pop);
    let y = pop.outcomes();
    LassoCd::new(&z, &y, mean(&y)).lambda_max()
}

fn log_path(hi: f64, ratio: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| hi * ratio.powf(i as f64 / (points - 1) as f64))
        .collect()
}

/// Smallest λ whose LASSO fit has at most `target_support` nonzero slopes.
pub fn lasso_support_lambda(pop: &Population, target_support: usize) -> Result<f64> {
    let k = pop.dim();
    if target_support == 0 || target_support > k {
        return Err(Error::InvalidInput(format!(
            "target_support must lie in [1, {k}], got {target_support}"
        )));
    }
    let st = Standardizer::fit(pop);
    let z = st.transform(pop);
    let y = pop.outcomes();
    let cd = LassoCd::new(&z, &y, mean(&y));
    let lmax = cd.lambda_max();
    if lmax == 0.0 {
        return Ok(0.0);
    }
    let settings = FitConfig::default().optimizer;
    let mut theta = vec![0.0; k];
    let active_at = |lambda: f64, theta: &mut Vec<f64>| -> Result<usize> {
        cd.solve(lambda, theta, settings.max_iterations, settings.gradient_tolerance)?;
        Ok(theta.iter().filter(|t| **t != 0.0).count())
    };
    let path = log_path(lmax, PATH_RATIO, SUPPORT_PATH_POINTS);
    let mut last_ok = path[0];
    let mut ok_theta = theta.clone();
    for &lambda in &path {
        if active_at(lambda, &mut theta)? <= target_support {
            last_ok = lambda;
            ok_theta.clone_from(&theta);
        } else {
            // bracket [lambda, last_ok]: refine
            let (mut lo, mut hi) = (lambda, last_ok);
            while hi / lo > 1.0 + 1e-4 {
                let mid = (lo * hi).sqrt();
                let mut t = ok_theta.clone();
                if active_at(mid, &mut t)? <= target_support {
                    hi = mid;
                    ok_theta = t;
                } else {
                    lo = mid;
                }
            }
            return Ok(hi);
        }
    }
    Ok(last_ok)
}

/// Outcome of penalized-fit cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda: f64,
    pub grid: Vec<f64>,
    pub mean_errors: Vec<f64>,
}

/// The 50-point grid searched by [`cross_validate_lambda`], ascending.
/// LASSO spans λ_max·1e-4 … λ_max; ridge spans 1e-4 … 1e4.
pub fn lambda_grid(pop: &Population, kind: PenaltyKind) -> Result<Vec<f64>> {
    let mut grid = match kind {
        PenaltyKind::Lasso => {
            let lmax = lasso_lambda_max(pop).max(f64::MIN_POSITIVE);
            log_path(lmax, PATH_RATIO, CV_GRID_POINTS)
        }
        PenaltyKind::Ridge => log_path(1e4, 1e-8, CV_GRID_POINTS),
        PenaltyKind::None => {
            return Err(Error::InvalidInput("cross-validation needs a lasso or ridge penalty".into()))
        }
    };
    grid.reverse();
    Ok(grid)
}

/// Fold index per agent: a seeded permutation dealt round-robin.
pub(crate) fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

/// Picks λ minimizing mean held-out MSE of the naive penalized fit. Ties go
/// to the larger λ.
pub fn cross_validate_lambda(pop: &Population, kind: PenaltyKind, folds: usize, seed: u64) -> Result<CvResult> {
    if folds < 2 {
        return Err(Error::InvalidInput(format!("folds must be at least 2, got {folds}")));
    }
    if folds > pop.len() {
        return Err(Error::InvalidInput(format!("{folds} folds for {} agents", pop.len())));
    }
    let grid = lambda_grid(pop, kind)?;
    let assign = fold_assignment(pop.len(), folds, seed);
    let opt = FitConfig::default().optimizer;

    let per_fold: Vec<Vec<f64>> = (0..folds)
        .into_par_iter()
        .map(|f| -> Result<Vec<f64>> {
            let train_idx: Vec<usize> = (0..pop.len()).filter(|&i| assign[i] != f).collect();
            let test_idx: Vec<usize> = (0..pop.len()).filter(|&i| assign[i] == f).collect();
            let train = pop.subset(&train_idx);
            let test = pop.subset(&test_idx);
            let st = Standardizer::fit(&train);
            let z = st.transform(&train);
            let y = train.outcomes();
            let y_mean = mean(&y);
            let mut errs = vec![0.0; grid.len()];
            match kind {
                PenaltyKind::Lasso => {
                    let cd = LassoCd::new(&z, &y, y_mean);
                    let mut theta = vec![0.0; pop.dim()];
                    // walk from the largest λ down for warm starts
                    for (gi, &lambda) in grid.iter().enumerate().rev() {
                        cd.solve(lambda, &mut theta, opt.max_iterations, opt.gradient_tolerance)?;
                        let rule = st.to_rule(&theta, y_mean, String::new())?;
                        errs[gi] = plain_mse(&rule, &test)?;
                    }
                }
                _ => {
                    for (gi, &lambda) in grid.iter().enumerate() {
                        let theta = ridge_solve(&z, &y, y_mean, lambda)?;
                        let rule = st.to_rule(theta.as_slice(), y_mean, String::new())?;
                        errs[gi] = plain_mse(&rule, &test)?;
                    }
                }
            }
            Ok(errs)
        })
        .collect::<Result<_>>()?;

    let mean_errors: Vec<f64> = (0..grid.len())
        .map(|g| per_fold.iter().map(|e| e[g]).sum::<f64>() / folds as f64)
        .collect();
    let best = mean_errors.iter().cloned().fold(f64::INFINITY, f64::min);
    let tie = 1e-12 * best.abs().max(f64::MIN_POSITIVE);
    let pick = (0..grid.len())
        .rev()
        .find(|&g| mean_errors[g] <= best + tie)
        .ok_or_else(|| Error::NonFinite("cross-validation errors".into()))?;
    Ok(CvResult {
        lambda: grid[pick],
        grid,
        mean_errors,
    })
}
