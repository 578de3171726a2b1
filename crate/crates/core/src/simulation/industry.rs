use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::fit_ols;
use crate::model::{best_response, counterfactual_loss, CostModel, DecisionRule, Population};

/// Ridge added to the slope block when a refit's normal equations are singular.
pub const FALLBACK_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IndustryMode {
    /// Refit on every period observed so far.
    #[default]
    Cumulative,
    /// Refit on the most recent period only.
    LastPeriod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndustryConfig {
    pub rounds: usize,
    #[serde(default)]
    pub mode: IndustryMode,
    /// Also stack the unmanipulated round-0 sample in cumulative mode.
    #[serde(default)]
    pub include_baseline: bool,
}

impl IndustryConfig {
    pub fn new(rounds: usize, mode: IndustryMode) -> Self {
        Self {
            rounds,
            mode,
            include_baseline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndustryRound {
    pub round: usize,
    pub rule: DecisionRule,
    pub loss_no_manip: f64,
    pub loss_manip: f64,
    pub training_rows: usize,
    /// The refit needed the ridge fallback.
    pub stabilized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndustryRunReport {
    pub mode: IndustryMode,
    pub initial_rule: DecisionRule,
    /// Round 0 holds the initial rule; round r was trained on data generated
    /// under the rule of round r−1.
    pub rounds: Vec<IndustryRound>,
}

impl IndustryRunReport {
    pub fn round(&self, r: usize) -> Option<&IndustryRound> {
        self.rounds.get(r)
    }
}

/// Running normal equations of y on (1, x).
struct Normal {
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
    rows: usize,
}

impl Normal {
    fn new(k: usize) -> Self {
        Self {
            gram: DMatrix::zeros(k + 1, k + 1),
            rhs: DVector::zeros(k + 1),
            rows: 0,
        }
    }

    fn add(&mut self, x: &[f64], y: f64) {
        let k = x.len();
        let row = |j: usize| if j == 0 { 1.0 } else { x[j - 1] };
        for i in 0..=k {
            let ri = row(i);
            self.rhs[i] += ri * y;
            for j in 0..=i {
                self.gram[(i, j)] += ri * row(j);
            }
        }
        self.rows += 1;
    }

    fn solve(&self) -> Result<(DecisionRule, bool)> {
        let n = self.gram.nrows();
        let full = DMatrix::from_fn(n, n, |i, j| if i >= j { self.gram[(i, j)] } else { self.gram[(j, i)] });
        let (coef, stabilized) = match full.clone().cholesky().map(|c| c.solve(&self.rhs)) {
            Some(c) if c.iter().all(|v| v.is_finite()) && well_conditioned(&full) => (c, false),
            _ => {
                let mut reg = full;
                for j in 1..n {
                    reg[(j, j)] += FALLBACK_RIDGE * self.rows as f64;
                }
                let c = reg
                    .cholesky()
                    .map(|c| c.solve(&self.rhs))
                    .ok_or_else(|| Error::Singular { columns: vec!["industry refit".into()] })?;
                (c, true)
            }
        };
        let rule = DecisionRule::new(coef[0], coef.as_slice()[1..].to_vec(), "industry")?;
        Ok((rule, stabilized))
    }
}

fn well_conditioned(m: &DMatrix<f64>) -> bool {
    let ev = m.clone().symmetric_eigen().eigenvalues;
    let max = ev.amax();
    ev.min() > 1e-12 * max
}

/// The iterated retraining ("industry") approach: agents best-respond to the
/// previous round's rule and OLS is refit on the resulting data.
pub fn run_industry_loop(
    pop: &Population,
    costs: &CostModel,
    cfg: &IndustryConfig,
    initial_rule: Option<&DecisionRule>,
) -> Result<IndustryRunReport> {
    if cfg.rounds == 0 {
        return Err(Error::InvalidInput("rounds must be at least 1".into()));
    }
    let k = pop.dim();
    if costs.dim() != k {
        return Err(Error::dim("population vs cost model", costs.dim(), k));
    }
    let initial = match initial_rule {
        Some(r) => r.clone(),
        None => fit_ols(pop)?.rule,
    }
    .with_label("industry");

    let record = |round: usize, rule: DecisionRule, rows: usize, stabilized: bool| -> Result<IndustryRound> {
        Ok(IndustryRound {
            round,
            loss_no_manip: counterfactual_loss(&rule, pop, costs, false, 0.0)?,
            loss_manip: counterfactual_loss(&rule, pop, costs, true, 0.0)?,
            rule,
            training_rows: rows,
            stabilized,
        })
    };

    let mut normal = Normal::new(k);
    if cfg.include_baseline && cfg.mode == IndustryMode::Cumulative {
        for a in pop.agents() {
            normal.add(&a.bliss, a.outcome);
        }
    }
    let base_rows = if initial_rule.is_none() { pop.len() } else { 0 };
    let mut rounds = vec![record(0, initial.clone(), base_rows, false)?];
    let mut current = initial.clone();
    for r in 1..=cfg.rounds {
        if cfg.mode == IndustryMode::LastPeriod {
            normal = Normal::new(k);
        }
        for a in pop.agents() {
            let x = best_response(a, &current, costs)?;
            normal.add(&x, a.outcome);
        }
        let (rule, stabilized) = normal.solve()?;
        let rule = rule.with_label(format!("industry({r})"));
        rounds.push(record(r, rule.clone(), normal.rows, stabilized)?);
        current = rule;
    }
    Ok(IndustryRunReport {
        mode: cfg.mode,
        initial_rule: initial,
        rounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{generate_population, presets, DgpConfig};

    fn small(seed: u64) -> (Population, CostModel) {
        let cfg = DgpConfig {
            n_agents: 400,
            seed,
            ..presets::table1()
        };
        (generate_population(&cfg).unwrap(), cfg.cost_model().unwrap())
    }

    #[test]
    fn no_gaming_means_no_drift() {
        let (pop, costs) = small(1);
        let agents = pop
            .agents()
            .iter()
            .map(|a| crate::model::Agent { gaming: 0.0, ..a.clone() })
            .collect();
        let still = Population::new(agents, pop.feature_names().to_vec()).unwrap();
        let rep = run_industry_loop(&still, &costs, &IndustryConfig::new(5, IndustryMode::Cumulative), None).unwrap();
        let r0 = &rep.rounds[0].rule;
        for r in &rep.rounds[1..] {
            for (a, b) in r.rule.to_vec().iter().zip(r0.to_vec()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cumulative_row_counts() {
        let (pop, costs) = small(2);
        let n = pop.len();
        for include_baseline in [false, true] {
            let cfg = IndustryConfig {
                include_baseline,
                ..IndustryConfig::new(4, IndustryMode::Cumulative)
            };
            let rep = run_industry_loop(&pop, &costs, &cfg, None).unwrap();
            for r in 1..=4 {
                let expected = if include_baseline { (r + 1) * n } else { r * n };
                assert_eq!(rep.rounds[r].training_rows, expected);
            }
        }
        let last = run_industry_loop(&pop, &costs, &IndustryConfig::new(3, IndustryMode::LastPeriod), None).unwrap();
        assert!(last.rounds[1..].iter().all(|r| r.training_rows == n));
    }

    #[test]
    fn losses_match_model_evaluation() {
        let (pop, costs) = small(3);
        let rep = run_industry_loop(&pop, &costs, &IndustryConfig::new(2, IndustryMode::Cumulative), None).unwrap();
        for r in &rep.rounds {
            assert_eq!(r.loss_manip, counterfactual_loss(&r.rule, &pop, &costs, true, 0.0).unwrap());
            assert_eq!(r.loss_no_manip, counterfactual_loss(&r.rule, &pop, &costs, false, 0.0).unwrap());
        }
    }

    #[test]
    fn round_one_refit_matches_qr_ols() {
        let (pop, costs) = small(4);
        let rep = run_industry_loop(&pop, &costs, &IndustryConfig::new(1, IndustryMode::LastPeriod), None).unwrap();
        let moved = pop.manipulated(&rep.rounds[0].rule, &costs).unwrap();
        let ols = fit_ols(&moved).unwrap().rule;
        for (a, b) in rep.rounds[1].rule.to_vec().iter().zip(ols.to_vec()) {
            assert!((a - b).abs() < 1e-8 * b.abs().max(1.0));
        }
    }
}
