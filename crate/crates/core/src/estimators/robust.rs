use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::linear::fit_ols;
use super::{mean, FitConfig, FitReport, PenaltyKind, Standardizer};
use crate::error::{Error, Result};
use crate::model::{counterfactual_loss, CostModel, DecisionRule, Population};
use crate::optim::{bfgs, fista_l1, Minimum};

/// Largest feature count for which restricted fits enumerate every support.
pub const MAX_ENUMERATED_FEATURES: usize = 25;

/// Objective ties closer than this are broken by the smaller support.
const SUPPORT_TIE: f64 = 1e-10;

/// The strategy-robust training objective, reduced to sufficient statistics.
///
/// With `e = y − β₀ − β'x̲` and `q = β'C⁻¹β`, the counterfactual residual of a
/// draw with ability `γ` is `e − γq`, so the mean squared residual is
/// `mean(e²) − 2q·mean(ḡe) + q²·mean(γ²)` where `ḡ` is the per-agent mean ability.
/// Parameters are `[β₀, β₁, …, β_K]` on the original scale.
#[derive(Debug, Clone)]
pub struct RobustObjective {
    inv_cost: DMatrix<f64>,
    m_y: f64,
    m_yy: f64,
    m_a: DVector<f64>,
    m_ay: DVector<f64>,
    m_aa: DMatrix<f64>,
    g1: f64,
    g_y: f64,
    g_a: DVector<f64>,
    g2: f64,
    welfare_weight: f64,
    penalty: PenaltyKind,
    lambda: f64,
    sd: Vec<f64>,
}

impl RobustObjective {
    pub fn new(pop: &Population, costs: &CostModel, cfg: &FitConfig) -> Result<Self> {
        let k = pop.dim();
        if costs.dim() != k {
            return Err(Error::dim("population vs cost model", costs.dim(), k));
        }
        if pop.is_empty() {
            return Err(Error::InvalidInput("empty population".into()));
        }
        let n = pop.len() as f64;
        let (mut m_y, mut m_yy, mut g1, mut g_y, mut g2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut m_a = DVector::zeros(k);
        let mut m_ay = DVector::zeros(k);
        let mut m_aa = DMatrix::zeros(k, k);
        let mut g_a = DVector::zeros(k);
        for ag in pop.agents() {
            let y = ag.outcome;
            let a = DVector::from_column_slice(&ag.bliss);
            let (gm, gsq) = costs.gaming_moments(ag.gaming);
            m_y += y;
            m_yy += y * y;
            m_a += &a;
            m_ay.axpy(y, &a, 1.0);
            m_aa.ger(1.0, &a, &a, 1.0);
            g1 += gm;
            g_y += gm * y;
            g_a.axpy(gm, &a, 1.0);
            g2 += gsq;
        }
        let sd = if cfg.penalty == PenaltyKind::None {
            vec![1.0; k]
        } else {
            Standardizer::fit(pop).sd
        };
        Ok(Self {
            inv_cost: costs.inv_cost().clone(),
            m_y: m_y / n,
            m_yy: m_yy / n,
            m_a: m_a / n,
            m_ay: m_ay / n,
            m_aa: m_aa / n,
            g1: g1 / n,
            g_y: g_y / n,
            g_a: g_a / n,
            g2: g2 / n,
            welfare_weight: cfg.welfare_weight,
            penalty: cfg.penalty,
            lambda: cfg.lambda,
            sd,
        })
    }

    /// Number of parameters, K+1.
    pub fn dim(&self) -> usize {
        self.m_a.len() + 1
    }

    /// Counterfactual MSE, welfare term and (for ridge) the squared penalty.
    /// Writes the gradient into `grad`.
    pub fn smooth(&self, p: &[f64], grad: &mut [f64]) -> f64 {
        let b0 = p[0];
        let beta = DVector::from_column_slice(&p[1..]);
        let s = &self.inv_cost * &beta;
        let q = beta.dot(&s);
        let aa_beta = &self.m_aa * &beta;
        let e2 = self.m_yy - 2.0 * b0 * self.m_y - 2.0 * beta.dot(&self.m_ay)
            + b0 * b0
            + 2.0 * b0 * beta.dot(&self.m_a)
            + beta.dot(&aa_beta);
        let ge = self.g_y - b0 * self.g1 - beta.dot(&self.g_a);
        let mut value = e2 - 2.0 * q * ge + q * q * self.g2;

        grad[0] = -2.0 * self.m_y + 2.0 * b0 + 2.0 * beta.dot(&self.m_a) + 2.0 * q * self.g1;
        for j in 0..beta.len() {
            grad[j + 1] = -2.0 * self.m_ay[j] + 2.0 * b0 * self.m_a[j] + 2.0 * aa_beta[j]
                - 4.0 * s[j] * ge
                + 2.0 * q * self.g_a[j]
                + 4.0 * q * self.g2 * s[j];
        }
        if self.welfare_weight != 0.0 {
            value += self.welfare_weight * 0.5 * self.g1 * q;
            for j in 0..beta.len() {
                grad[j + 1] += self.welfare_weight * self.g1 * s[j];
            }
        }
        if self.penalty == PenaltyKind::Ridge {
            for j in 0..beta.len() {
                let w = self.lambda * self.sd[j] * self.sd[j];
                value += w * beta[j] * beta[j];
                grad[j + 1] += 2.0 * w * beta[j];
            }
        }
        value
    }

    /// Per-parameter L1 weights (zero unless the penalty is LASSO).
    pub fn l1_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.dim()];
        if self.penalty == PenaltyKind::Lasso {
            for (j, s) in self.sd.iter().enumerate() {
                w[j + 1] = 2.0 * self.lambda * s;
            }
        }
        w
    }

    /// Full penalized objective.
    pub fn value(&self, p: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        let smooth = self.smooth(p, &mut g);
        smooth + self.l1_weights().iter().zip(p).map(|(w, x)| w * x.abs()).sum::<f64>()
    }

    /// Standard deviations used to scale the penalty (ones when unpenalized).
    pub fn scales(&self) -> &[f64] {
        &self.sd
    }

    fn minimize(&self, start: &[f64], cfg: &FitConfig) -> Minimum {
        let settings = cfg.optimizer.settings();
        let f = |p: &[f64], g: &mut [f64]| self.smooth(p, g);
        if self.penalty == PenaltyKind::Lasso && self.lambda > 0.0 {
            fista_l1(f, &self.l1_weights(), start, settings)
        } else {
            bfgs(f, start, settings)
        }
    }
}

fn starting_points(pop: &Population, cfg: &FitConfig) -> Vec<Vec<f64>> {
    let k = pop.dim();
    let ols = fit_ols(pop)
        .map(|r| r.rule.to_vec())
        .unwrap_or_else(|_| {
            let mut v = vec![0.0; k + 1];
            v[0] = mean(&pop.outcomes());
            v
        });
    let mut starts = vec![ols.clone(), vec![0.0; k + 1]];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.optimizer.seed);
    while starts.len() < cfg.optimizer.restarts {
        let p = ols
            .iter()
            .map(|b| {
                let z: f64 = StandardNormal.sample(&mut rng);
                b + b.abs() * z
            })
            .collect();
        starts.push(p);
    }
    starts.truncate(cfg.optimizer.restarts);
    starts
}

/// Fits the rule minimizing the counterfactual loss under best-response
/// manipulation, averaged over every gaming shock, plus the configured
/// welfare and penalty terms. A `support_limit` below K dispatches to
/// [`fit_strategy_robust_restricted`].
pub fn fit_strategy_robust(pop: &Population, costs: &CostModel, cfg: &FitConfig) -> Result<FitReport> {
    cfg.validate()?;
    match cfg.support_limit {
        Some(l) if l < pop.dim() => fit_strategy_robust_restricted(pop, costs, cfg),
        _ => fit_unrestricted(pop, costs, cfg),
    }
}

fn fit_unrestricted(pop: &Population, costs: &CostModel, cfg: &FitConfig) -> Result<FitReport> {
    let objective = RobustObjective::new(pop, costs, cfg)?;
    let starts = starting_points(pop, cfg);
    let runs: Vec<Minimum> = starts
        .par_iter()
        .map(|s| objective.minimize(s, cfg))
        .collect();

    let best_of = |only_converged: bool| {
        runs.iter()
            .filter(|m| m.value.is_finite() && (m.converged || !only_converged))
            .fold(None::<&Minimum>, |acc, m| match acc {
                Some(a) if a.value <= m.value => Some(a),
                _ => Some(m),
            })
    };
    let Some(best) = best_of(true) else {
        return match best_of(false) {
            Some(m) => Err(Error::NonConvergence {
                iterations: m.iterations,
                objective: m.value,
                best: m.x.clone(),
            }),
            None => Err(Error::NonFinite("strategy-robust objective".into())),
        };
    };
    let rule = DecisionRule::new(best.x[0], best.x[1..].to_vec(), "strategy_robust")?;
    let in_sample_loss = counterfactual_loss(&rule, pop, costs, true, 0.0)?;
    Ok(FitReport {
        estimator: "strategy_robust".into(),
        rule,
        in_sample_loss,
        converged: true,
        iterations_used: best.iterations,
        objective_value: best.value,
        config: *cfg,
        support: None,
    })
}

fn intercept_only(pop: &Population, costs: &CostModel, cfg: &FitConfig) -> Result<FitReport> {
    let rule = DecisionRule::constant(mean(&pop.outcomes()), pop.dim(), "strategy_robust");
    let in_sample_loss = counterfactual_loss(&rule, pop, costs, true, 0.0)?;
    Ok(FitReport {
        estimator: "strategy_robust".into(),
        rule,
        in_sample_loss,
        converged: true,
        iterations_used: 0,
        objective_value: in_sample_loss,
        config: *cfg,
        support: Some(vec![]),
    })
}

/// Fit on the coordinates in `support`, embedded back into all K features.
/// Returns `None` if the sub-fit failed to converge.
fn fit_support(
    pop: &Population,
    costs: &CostModel,
    cfg: &FitConfig,
    full: &RobustObjective,
    support: &[usize],
) -> Result<Option<(f64, FitReport)>> {
    if support.is_empty() {
        let rep = intercept_only(pop, costs, cfg)?;
        let value = full.value(&rep.rule.to_vec());
        return Ok(Some((value, rep)));
    }
    let sub_cfg = FitConfig {
        support_limit: None,
        ..*cfg
    };
    let sub = match fit_unrestricted(&pop.select_features(support), &costs.restricted(support)?, &sub_cfg) {
        Ok(r) => r,
        Err(Error::NonConvergence { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut beta = vec![0.0; pop.dim()];
    for (&j, b) in support.iter().zip(&sub.rule.coefficients) {
        beta[j] = *b;
    }
    let rule = DecisionRule::new(sub.rule.intercept, beta, "strategy_robust")?;
    let value = full.value(&rule.to_vec());
    let in_sample_loss = counterfactual_loss(&rule, pop, costs, true, 0.0)?;
    Ok(Some((
        value,
        FitReport {
            rule,
            in_sample_loss,
            objective_value: value,
            config: *cfg,
            support: Some(support.to_vec()),
            ..sub
        },
    )))
}

fn combinations(k: usize, max_size: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..max_size {
        let mut next = Vec::new();
        for s in &frontier {
            let start = s.last().map_or(0, |l| l + 1);
            for j in start..k {
                let mut t = s.clone();
                t.push(j);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out.sort();
    out
}

/// Picks the lexicographically smallest support among near-minimal objectives.
fn select(cands: Vec<(Vec<usize>, f64, FitReport)>) -> Result<FitReport> {
    let best = cands.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    cands
        .into_iter()
        .find(|c| c.1 <= best + SUPPORT_TIE)
        .map(|c| c.2)
        .ok_or_else(|| Error::NonConvergence {
            iterations: 0,
            objective: f64::NAN,
            best: vec![],
        })
}

/// Best strategy-robust rule using at most `cfg.support_limit` features.
/// Supports are enumerated exhaustively up to [`MAX_ENUMERATED_FEATURES`]
/// features and chosen greedily beyond that.
pub fn fit_strategy_robust_restricted(pop: &Population, costs: &CostModel, cfg: &FitConfig) -> Result<FitReport> {
    cfg.validate()?;
    let k = pop.dim();
    let limit = cfg.support_limit.unwrap_or(k).min(k);
    if limit == k {
        let mut rep = fit_unrestricted(pop, costs, cfg)?;
        rep.support = Some((0..k).collect());
        return Ok(rep);
    }
    let full = RobustObjective::new(pop, costs, cfg)?;
    if k > MAX_ENUMERATED_FEATURES {
        return greedy(pop, costs, cfg, &full, limit);
    }
    let supports = combinations(k, limit);
    let fits: Vec<Option<(f64, FitReport)>> = supports
        .par_iter()
        .map(|s| fit_support(pop, costs, cfg, &full, s))
        .collect::<Result<_>>()?;
    let cands = supports
        .into_iter()
        .zip(fits)
        .filter_map(|(s, f)| f.map(|(v, r)| (s, v, r)))
        .collect();
    select(cands)
}

fn greedy(
    pop: &Population,
    costs: &CostModel,
    cfg: &FitConfig,
    full: &RobustObjective,
    limit: usize,
) -> Result<FitReport> {
    let mut current: Vec<usize> = vec![];
    let mut visited = Vec::new();
    if let Some((v, r)) = fit_support(pop, costs, cfg, full, &current)? {
        visited.push((current.clone(), v, r));
    }
    for _ in 0..limit {
        let trials: Vec<Vec<usize>> = (0..pop.dim())
            .filter(|j| !current.contains(j))
            .map(|j| {
                let mut s = current.clone();
                s.push(j);
                s.sort_unstable();
                s
            })
            .collect();
        let fits: Vec<Option<(f64, FitReport)>> = trials
            .par_iter()
            .map(|s| fit_support(pop, costs, cfg, full, s))
            .collect::<Result<_>>()?;
        let step: Vec<_> = trials
            .into_iter()
            .zip(fits)
            .filter_map(|(s, f)| f.map(|(v, r)| (s, v, r)))
            .collect();
        let Some(bv) = step.iter().map(|c| c.1).reduce(f64::min) else {
            break;
        };
        let chosen = step.into_iter().find(|c| c.1 <= bv + SUPPORT_TIE).unwrap();
        current = chosen.0.clone();
        visited.push(chosen);
    }
    visited.sort_by(|a, b| a.0.cmp(&b.0));
    select(visited)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{fit_lasso, fit_ridge, OptimizerConfig};
    use crate::model::Agent;

    /// K features, homogeneous-or-threshold gaming, noisy linear outcome.
    fn world(n: usize, k: usize, seed: u64, gaming: impl Fn(&[f64]) -> f64) -> Population {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let agents = (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
                let e: f64 = StandardNormal.sample(&mut rng);
                let y = 0.3 + x.iter().enumerate().map(|(j, v)| (1.0 + j as f64 * 0.5) * v).sum::<f64>() + 0.5 * e;
                let g = gaming(&x);
                Agent::new(x, g, vec![], y).unwrap()
            })
            .collect();
        Population::new(agents, crate::model::default_feature_names(k)).unwrap()
    }

    fn costs(k: usize) -> CostModel {
        let m = DMatrix::from_fn(k, k, |i, j| if i == j { 0.5 / (1.0 + i as f64) } else { 0.05 });
        CostModel::new(m).unwrap()
    }

    #[test]
    fn matches_grid_oracle_in_one_dimension() {
        let pop = world(200, 1, 11, |_| 1.0);
        let c = CostModel::new(DMatrix::from_element(1, 1, 0.8)).unwrap();
        let fit = fit_strategy_robust(&pop, &c, &FitConfig::default()).unwrap();
        // β₀ profiled in closed form: mean of y − β·x̲ − γ·c·β²
        let y = pop.outcomes();
        let loss_at = |b: f64| {
            let r: Vec<f64> = pop
                .agents()
                .iter()
                .map(|a| a.outcome - b * a.bliss[0] - a.gaming * 0.8 * b * b)
                .collect();
            let m = r.iter().sum::<f64>() / y.len() as f64;
            r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / y.len() as f64
        };
        let step = 20.0 / 10_000.0;
        let (best_b, _) = (0..=10_000)
            .map(|i| -10.0 + i as f64 * step)
            .map(|b| (b, loss_at(b)))
            .fold((0.0, f64::INFINITY), |acc, (b, l)| if l < acc.1 { (b, l) } else { acc });
        assert!((fit.rule.coefficients[0] - best_b).abs() <= step, "{} vs {best_b}", fit.rule.coefficients[0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..100 {
            let k = 1 + trial % 3;
            let pop = world(60, k, trial as u64, |x| if x[0] > 0.2 { 3.0 } else { 0.5 });
            let c = costs(k).with_gaming_shocks(vec![-0.3, 0.0, 0.3]).unwrap();
            let cfg = FitConfig {
                penalty: if trial % 2 == 0 { PenaltyKind::Ridge } else { PenaltyKind::None },
                lambda: 0.1,
                welfare_weight: (trial % 4) as f64 * 0.5,
                ..FitConfig::default()
            };
            let obj = RobustObjective::new(&pop, &c, &cfg).unwrap();
            let p: Vec<f64> = (0..=k).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 2.0 * z }).collect();
            let mut g = vec![0.0; k + 1];
            obj.smooth(&p, &mut g);
            let sd = Standardizer::fit(&pop).sd;
            let mut scratch = vec![0.0; k + 1];
            for j in 0..=k {
                let h = if j == 0 { 1e-5 } else { 1e-5 / sd[j - 1] };
                let mut up = p.clone();
                let mut dn = p.clone();
                up[j] += h;
                dn[j] -= h;
                let fd = (obj.smooth(&up, &mut scratch) - obj.smooth(&dn, &mut scratch)) / (2.0 * h);
                let scale = g[j].abs().max(1.0);
                assert!((fd - g[j]).abs() <= 1e-5 * scale, "trial {trial} coord {j}: {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn no_gaming_nests_naive_fits() {
        let pop = world(300, 3, 5, |_| 0.0);
        let c = costs(3);
        let ols = fit_ols(&pop).unwrap().rule;
        let sr = fit_strategy_robust(&pop, &c, &FitConfig::default()).unwrap().rule;
        for (a, b) in ols.to_vec().iter().zip(sr.to_vec()) {
            assert!((a - b).abs() < 1e-6);
        }
        for (kind, lambda) in [(PenaltyKind::Ridge, 0.3), (PenaltyKind::Lasso, 0.2)] {
            let cfg = FitConfig {
                penalty: kind,
                lambda,
                ..FitConfig::default()
            };
            let naive = match kind {
                PenaltyKind::Ridge => fit_ridge(&pop, lambda).unwrap().rule,
                _ => fit_lasso(&pop, lambda).unwrap().rule,
            };
            let sr = fit_strategy_robust(&pop, &c, &cfg).unwrap().rule;
            for (a, b) in naive.to_vec().iter().zip(sr.to_vec()) {
                assert!((a - b).abs() < 1e-6, "{kind}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn first_order_moment_identity_holds() {
        let pop = world(500, 2, 7, |x| if x[0] > 0.0 { 2.0 } else { 0.7 });
        let c = costs(2).with_gaming_shocks(vec![-0.2, 0.2]).unwrap();
        let cfg = FitConfig::default();
        let fit = fit_strategy_robust(&pop, &c, &cfg).unwrap();
        let r = &fit.rule;
        let s = c.shift(&r.coefficients).unwrap();
        let q = r.coefficients.iter().zip(s.iter()).map(|(a, b)| a * b).sum::<f64>();
        let n = pop.len() as f64;
        let mut lhs = [0.0; 2];
        let mut rhs = [0.0; 2];
        for a in pop.agents() {
            let e = a.outcome - crate::model::predict(r, &a.bliss).unwrap();
            let draws: Vec<f64> = c.gaming_draws(a.gaming).collect();
            for g in &draws {
                let res = e - g * q;
                let w = 1.0 / draws.len() as f64 / n;
                for j in 0..2 {
                    lhs[j] += w * a.bliss[j] * res;
                    rhs[j] += w * g * s[j] * res;
                }
            }
        }
        for j in 0..2 {
            assert!((lhs[j] + 2.0 * rhs[j]).abs() <= 10.0 * cfg.optimizer.gradient_tolerance);
        }
    }

    #[test]
    fn beats_ols_under_manipulation_and_is_deterministic() {
        let pop = world(400, 3, 8, |x| if x[0] > 0.2 { 10.0 } else { 1.0 });
        let c = costs(3);
        let cfg = FitConfig {
            optimizer: OptimizerConfig {
                seed: 3,
                ..OptimizerConfig::default()
            },
            ..FitConfig::default()
        };
        let a = fit_strategy_robust(&pop, &c, &cfg).unwrap();
        let b = fit_strategy_robust(&pop, &c, &cfg).unwrap();
        assert_eq!(a, b);
        let ols = fit_ols(&pop).unwrap().rule;
        let l_ols = counterfactual_loss(&ols, &pop, &c, true, 0.0).unwrap();
        assert!(a.in_sample_loss <= l_ols);
    }

    #[test]
    fn support_limit_at_k_is_unrestricted() {
        let pop = world(200, 2, 9, |_| 1.0);
        let c = costs(2);
        let cfg = FitConfig::default();
        let free = fit_strategy_robust(&pop, &c, &cfg).unwrap();
        let lim = fit_strategy_robust_restricted(&pop, &c, &FitConfig { support_limit: Some(2), ..cfg }).unwrap();
        assert_eq!(free.rule, lim.rule);
    }

    #[test]
    fn restricted_picks_the_costless_predictive_feature() {
        // y depends only on x₂, and x₂ cannot be manipulated
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let agents = (0..200)
            .map(|_| {
                let x: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
                Agent::new(x.clone(), 1.0, vec![], 2.0 * x[1]).unwrap()
            })
            .collect();
        let pop = Population::new(agents, crate::model::default_feature_names(3)).unwrap();
        let c = CostModel::new(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-12, 1.0]))).unwrap();
        let cfg = FitConfig {
            support_limit: Some(1),
            ..FitConfig::default()
        };
        let fit = fit_strategy_robust(&pop, &c, &cfg).unwrap();
        assert_eq!(fit.support, Some(vec![1]));
    }

    #[test]
    fn supports_are_lexicographic() {
        let s = combinations(3, 2);
        assert_eq!(
            s,
            vec![vec![], vec![0], vec![0, 1], vec![0, 2], vec![1], vec![1, 2], vec![2]]
        );
    }
}
