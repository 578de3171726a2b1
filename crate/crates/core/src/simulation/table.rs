use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{generate_population, DgpConfig};
use super::industry::{run_industry_loop, IndustryConfig, IndustryMode};
use super::misspecify_costs;
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::estimators::{fit_ols, fit_strategy_robust, FitConfig, OptimizerConfig};
use crate::model::{counterfactual_loss, CostModel, DecisionRule, Population};

fn default_replications() -> usize {
    20
}

fn default_scale() -> f64 {
    2.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndustrySection {
    #[serde(default)]
    pub mode: IndustryMode,
    /// Rounds to report, e.g. `[1, 2, 3, 1000]`. The loop runs to the largest.
    pub report_rounds: Vec<usize>,
    #[serde(default)]
    pub include_baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StableSection {
    /// Cumulative industry rounds to report after deploying the robust rule.
    #[serde(default)]
    pub followups: Vec<usize>,
    #[serde(default)]
    pub welfare_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisspecifiedSection {
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "yes")]
    pub diagonal_only: bool,
    #[serde(default)]
    pub followups: Vec<usize>,
}

/// A Monte Carlo table: which rules to fit on each replication of a DGP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableScenario {
    pub title: String,
    #[serde(default = "default_replications")]
    pub replications: usize,
    pub dgp: DgpConfig,
    #[serde(default)]
    pub industry: Option<IndustrySection>,
    #[serde(default)]
    pub stable: Option<StableSection>,
    #[serde(default)]
    pub misspecified: Option<MisspecifiedSection>,
}

impl TableScenario {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidInput("replications must be at least 1".into()));
        }
        self.dgp.validate()?;
        if let Some(ind) = &self.industry {
            if ind.report_rounds.is_empty() || ind.report_rounds.contains(&0) {
                return Err(Error::InvalidInput("industry.report_rounds must be non-empty and >= 1".into()));
            }
        }
        if let Some(m) = &self.misspecified {
            if !(m.scale > 0.0) {
                return Err(Error::InvalidInput("misspecified.scale must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One rule on one replication, evaluated on the training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowValue {
    pub label: String,
    /// Intercept first.
    pub coefficients: Vec<f64>,
    pub loss_no_manip: f64,
    pub loss_manip: f64,
}

impl RowValue {
    pub fn evaluate(label: impl Into<String>, rule: &DecisionRule, pop: &Population, costs: &CostModel) -> Result<Self> {
        Ok(Self {
            label: label.into(),
            coefficients: rule.to_vec(),
            loss_no_manip: counterfactual_loss(rule, pop, costs, false, 0.0)?,
            loss_manip: counterfactual_loss(rule, pop, costs, true, 0.0)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub label: String,
    pub coef_mean: Vec<f64>,
    pub coef_sd: Vec<f64>,
    pub no_manip_mean: f64,
    pub no_manip_sd: f64,
    pub manip_mean: f64,
    pub manip_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub title: String,
    pub base_seed: u64,
    pub rows: Vec<RowSummary>,
    pub replications: Vec<Vec<RowValue>>,
}

impl TableReport {
    pub fn row(&self, label: &str) -> Option<&RowSummary> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Per-replication values of one row.
    pub fn values(&self, label: &str) -> Vec<&RowValue> {
        self.replications
            .iter()
            .filter_map(|rep| rep.iter().find(|r| r.label == label))
            .collect()
    }
}

pub fn after_label(round: usize, base: &str) -> String {
    format!("ols({round}) after {base}")
}

fn followups(
    rows: &mut Vec<RowValue>,
    pop: &Population,
    costs: &CostModel,
    start: &DecisionRule,
    base: &str,
    mode: IndustryMode,
    include_baseline: bool,
    report: &[usize],
) -> Result<()> {
    let Some(&last) = report.iter().max() else {
        return Ok(());
    };
    let cfg = IndustryConfig {
        rounds: last,
        mode,
        include_baseline,
    };
    let run = run_industry_loop(pop, costs, &cfg, Some(start))?;
    for &r in report {
        rows.push(RowValue::evaluate(after_label(r, base), &run.rounds[r].rule, pop, costs)?);
    }
    Ok(())
}

/// All rows of the table for a single seed.
pub fn run_replication(scn: &TableScenario, seed: u64) -> Result<Vec<RowValue>> {
    let dgp = scn.dgp.with_seed(seed);
    let pop = generate_population(&dgp)?;
    let costs = dgp.cost_model()?;
    let mut rows = vec![RowValue::evaluate("b_dgp", &dgp.true_rule()?, &pop, &costs)?];
    let ols = fit_ols(&pop)?.rule;
    rows.push(RowValue::evaluate("ols", &ols, &pop, &costs)?);
    if let Some(ind) = &scn.industry {
        followups(&mut rows, &pop, &costs, &ols, "ols", ind.mode, ind.include_baseline, &ind.report_rounds)?;
    }
    let fit_cfg = |welfare_weight: f64| FitConfig {
        welfare_weight,
        optimizer: OptimizerConfig {
            seed,
            ..OptimizerConfig::default()
        },
        ..FitConfig::default()
    };
    if let Some(st) = &scn.stable {
        let rule = fit_strategy_robust(&pop, &costs, &fit_cfg(st.welfare_weight))?.rule;
        rows.push(RowValue::evaluate("stable", &rule, &pop, &costs)?);
        followups(&mut rows, &pop, &costs, &rule, "stable", IndustryMode::Cumulative, false, &st.followups)?;
    }
    if let Some(m) = &scn.misspecified {
        let wrong = misspecify_costs(&costs, m.diagonal_only, m.scale)?;
        let rule = fit_strategy_robust(&pop, &wrong, &fit_cfg(0.0))?.rule;
        rows.push(RowValue::evaluate("stable_misspecified", &rule, &pop, &costs)?);
        followups(
            &mut rows,
            &pop,
            &costs,
            &rule,
            "stable_misspecified",
            IndustryMode::Cumulative,
            false,
            &m.followups,
        )?;
    }
    Ok(rows)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Runs `scn.replications` seeds, `base_seed`, `base_seed + 1`, …, in
/// parallel and summarizes each row by its mean and standard deviation.
pub fn run_table(scn: &TableScenario, base_seed: u64) -> Result<TableReport> {
    scn.validate()?;
    let reps: Vec<Vec<RowValue>> = (0..scn.replications as u64)
        .into_par_iter()
        .map(|i| run_replication(scn, base_seed.wrapping_add(i)))
        .collect::<Result<_>>()?;
    let rows = reps[0]
        .iter()
        .enumerate()
        .map(|(idx, first)| {
            let col = |f: &dyn Fn(&RowValue) -> f64| -> (f64, f64) {
                mean_sd(&reps.iter().map(|r| f(&r[idx])).collect::<Vec<_>>())
            };
            let (coef_mean, coef_sd) = (0..first.coefficients.len())
                .map(|j| col(&|r: &RowValue| r.coefficients[j]))
                .unzip();
            let (no_manip_mean, no_manip_sd) = col(&|r: &RowValue| r.loss_no_manip);
            let (manip_mean, manip_sd) = col(&|r: &RowValue| r.loss_manip);
            RowSummary {
                label: first.label.clone(),
                coef_mean,
                coef_sd,
                no_manip_mean,
                no_manip_sd,
                manip_mean,
                manip_sd,
            }
        })
        .collect();
    Ok(TableReport {
        title: scn.title.clone(),
        base_seed,
        rows,
        replications: reps,
    })
}

/// Summary rows as CSV: a `mean` and an `sd` line per rule.
pub fn table_csv(report: &TableReport) -> String {
    let k = report.rows.first().map_or(0, |r| r.coef_mean.len().saturating_sub(1));
    let mut out = String::from("row,statistic,beta0");
    for j in 1..=k {
        out += &format!(",beta_{j}");
    }
    out += ",no_manip,manip\n";
    for r in &report.rows {
        for (stat, coefs, a, b) in [
            ("mean", &r.coef_mean, r.no_manip_mean, r.manip_mean),
            ("sd", &r.coef_sd, r.no_manip_sd, r.manip_sd),
        ] {
            out += &format!("{},{stat}", r.label);
            for c in coefs {
                out += &format!(",{}", fmt_f64(*c));
            }
            out += &format!(",{},{}\n", fmt_f64(a), fmt_f64(b));
        }
    }
    out
}

/// Markdown table in the usual Monte Carlo table layout: means,
/// with standard deviations across replications in parentheses.
pub fn table_markdown(report: &TableReport) -> String {
    let k = report.rows.first().map_or(0, |r| r.coef_mean.len().saturating_sub(1));
    let n = report.replications.len();
    let mut out = format!("### {}\n\n", report.title);
    out += "| Decision rule | β0 |";
    for j in 1..=k {
        out += &format!(" β{j} |");
    }
    out += " No manip. | Manipulation |\n|---|";
    for _ in 0..=k {
        out += "---:|";
    }
    out += "---:|---:|\n";
    let cell = |m: f64, s: f64| format!("{m:.3} ({s:.3})");
    for r in &report.rows {
        out += &format!("| {} |", r.label);
        for (m, s) in r.coef_mean.iter().zip(&r.coef_sd) {
            out += &format!(" {} |", cell(*m, *s));
        }
        out += &format!(
            " {} | {} |\n",
            cell(r.no_manip_mean, r.no_manip_sd),
            cell(r.manip_mean, r.manip_sd)
        );
    }
    out += &format!(
        "\nMeans over {n} replication(s) from seed {} (standard deviations in parentheses). \
         Losses are evaluated on the training sample.\n",
        report.base_seed
    );
    out
}
