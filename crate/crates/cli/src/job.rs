//! Fully resolved jobs and their in-memory execution. Nothing here touches
//! the output directory; `run` returns every output file as bytes.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use strategy_robust::estimators::{
    cross_validate_lambda, fit_lasso, fit_ols, fit_ridge, fit_strategy_robust, lasso_support_lambda, CvResult,
    FitConfig, FitReport, OptimizerConfig, PenaltyKind,
};
use strategy_robust::gmm::{
    cv_lambda_costs, fit_primitives, generate_panel, CostCv, GmmOptions, PanelDgp, PrimitivesEstimate,
};
use strategy_robust::io::{self, CostModelFile};
use strategy_robust::model::{counterfactual_loss, loss_parts};
use strategy_robust::simulation::{
    comparative_statics_sweep, generate_population, run_table, sweep_csv, table_csv, table_markdown,
    transparency_cost, DgpConfig, SweepConfig, SweepRow, TableScenario, TransparencyBounds,
};
use strategy_robust::{CostModel, DecisionRule, Population};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Ols,
    Ridge,
    Lasso,
    Stable,
}

/// `[population]` for a cross-section or `[panel]` for an incentive panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<DgpConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub panel: Option<PanelDgp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitJob {
    pub population: PathBuf,
    pub costs: PathBuf,
    pub estimator: Estimator,
    /// Penalty of the strategy-robust fit; the naive estimators imply theirs.
    pub penalty: PenaltyKind,
    pub lambda: Option<f64>,
    pub support: Option<usize>,
    pub welfare_weight: f64,
    pub folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCvSpec {
    pub folds: usize,
    pub diag_grid: Vec<f64>,
    #[serde(with = "lambda_list")]
    pub offdiag_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateJob {
    pub panel: PathBuf,
    pub covariates: Option<PathBuf>,
    pub options: GmmOptions,
    pub cv: Option<CostCvSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateJob {
    pub rule: PathBuf,
    pub population: PathBuf,
    pub costs: PathBuf,
    pub manipulated: bool,
    pub welfare_weight: f64,
    pub transparency: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Job {
    Simulate { scenario: TableScenario },
    Sweep { sweep: SweepConfig },
    Generate { generate: GenerateConfig },
    Fit(FitJob),
    EstimateCosts(EstimateJob),
    Evaluate(EvaluateJob),
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Simulate { .. } => "simulate",
            Job::Sweep { .. } => "sweep",
            Job::Generate { .. } => "generate",
            Job::Fit(_) => "fit",
            Job::EstimateCosts(_) => "estimate-costs",
            Job::Evaluate(_) => "evaluate",
        }
    }

    /// Data files read at run time.
    pub fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Job::Fit(j) => vec![j.population.clone(), j.costs.clone()],
            Job::EstimateCosts(j) => std::iter::once(j.panel.clone()).chain(j.covariates.clone()).collect(),
            Job::Evaluate(j) => [j.rule.clone(), j.population.clone(), j.costs.clone()]
                .into_iter()
                .chain(j.transparency.clone())
                .collect(),
            _ => vec![],
        }
    }
}

/// Serializes lists of penalty weights with infinity as `"inf"`.
mod lambda_list {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct W(#[serde(with = "strategy_robust::gmm::serde_lambda")] f64);

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|x| W(*x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<W>::deserialize(d)?.into_iter().map(|w| w.0).collect())
    }
}

/// The main report of a run in each format it exists in.
#[derive(Debug, Default)]
pub struct Report {
    pub csv: Option<String>,
    pub md: Option<String>,
    pub json: String,
}

pub struct Outcome {
    pub files: Vec<(String, Vec<u8>)>,
    pub report: Report,
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> strategy_robust::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn read(path: &PathBuf) -> Result<String> {
    Ok(io::read_file(path)?)
}

fn load_costs(path: &PathBuf) -> Result<CostModel> {
    io::cost_model_from_json(&read(path)?).with_context(|| format!("in {}", path.display()))
}

/// Reads a population; without a `gamma` column abilities come from the
/// cost model's loadings on the observables.
fn load_population(path: &PathBuf, costs: &CostModel) -> Result<Population> {
    let (pop, has_gamma) =
        io::read_population_csv_checked(read(path)?.as_bytes()).with_context(|| format!("in {}", path.display()))?;
    if has_gamma {
        Ok(pop)
    } else {
        Ok(pop.with_observed_gaming(costs)?)
    }
}

pub fn run(job: &Job, seed: Option<u64>) -> Result<Outcome> {
    let seed_or = |what: &str| seed.with_context(|| format!("{what} needs --seed"));
    match job {
        Job::Simulate { scenario } => simulate(scenario, seed_or("simulate")?),
        Job::Sweep { sweep } => run_sweep(sweep),
        Job::Generate { generate } => run_generate(generate),
        Job::Fit(j) => run_fit(j, seed_or("fit")?),
        Job::EstimateCosts(j) => run_estimate(j, seed_or("estimate-costs")?),
        Job::Evaluate(j) => run_evaluate(j),
    }
}

fn simulate(scn: &TableScenario, seed: u64) -> Result<Outcome> {
    scn.validate()?;
    log::info!(
        "{}: {} replications of N={} from seed {seed}",
        scn.title,
        scn.replications,
        scn.dgp.n_agents
    );
    let report = run_table(scn, seed)?;
    let csv = table_csv(&report);
    let md = table_markdown(&report);
    let js = json(&report)?;
    Ok(Outcome {
        files: vec![
            ("table.csv".into(), csv.clone().into_bytes()),
            ("table.md".into(), md.clone().into_bytes()),
            ("table.json".into(), js.clone().into_bytes()),
        ],
        report: Report {
            csv: Some(csv),
            md: Some(md),
            json: js,
        },
    })
}

fn sweep_markdown(rows: &[SweepRow]) -> String {
    let mut out = String::from("| axis | value | estimator | coefficients | loss_oos |\n|---|---|---|---|---|\n");
    for r in rows {
        let coefs: Vec<String> = r.coefficients.iter().map(|c| format!("{c:.3}")).collect();
        out += &format!(
            "| {} | {} | {} | {} | {:.3} |\n",
            r.axis.name(),
            io::fmt_f64(r.value),
            r.estimator.name(),
            coefs.join(", "),
            r.loss_oos
        );
    }
    out
}

fn run_sweep(cfg: &SweepConfig) -> Result<Outcome> {
    log::info!(
        "sweeping {} over {} points with {} estimators",
        cfg.axis.name(),
        cfg.grid.len(),
        cfg.estimators.len()
    );
    let rows = comparative_statics_sweep(cfg)?;
    let csv = sweep_csv(&rows);
    Ok(Outcome {
        files: vec![("sweep.csv".into(), csv.clone().into_bytes())],
        report: Report {
            csv: Some(csv),
            md: Some(sweep_markdown(&rows)),
            json: json(&rows)?,
        },
    })
}

fn run_generate(cfg: &GenerateConfig) -> Result<Outcome> {
    match (&cfg.population, &cfg.panel) {
        (Some(dgp), None) => {
            log::info!("drawing {} agents", dgp.n_agents);
            let pop = generate_population(dgp)?;
            let costs = dgp.cost_model()?.with_feature_names(pop.feature_names().to_vec())?;
            let rule = dgp.true_rule()?;
            let costs_json = io::cost_model_to_json(&costs)? + "\n";
            Ok(Outcome {
                files: vec![
                    ("population.csv".into(), csv_bytes(|b| io::write_population_csv(&pop, b, true))?),
                    ("costs.json".into(), costs_json.clone().into_bytes()),
                    ("true_rule.csv".into(), csv_bytes(|b| io::write_rules_csv(&[rule], b))?),
                ],
                report: Report {
                    json: costs_json,
                    ..Report::default()
                },
            })
        }
        (None, Some(dgp)) => {
            log::info!("drawing a panel of {} agents over {} weeks", dgp.n_agents, dgp.n_weeks);
            let (panel, truth) = generate_panel(dgp)?;
            let costs = CostModelFile {
                inv_cost: dgp.inv_cost.clone(),
                omega: dgp.omega.clone(),
                gaming_shocks: if dgp.shock_sd > 0.0 { truth.shocks } else { vec![] },
                feature_names: panel.feature_names.clone(),
            }
            .to_model()?;
            let costs_json = io::cost_model_to_json(&costs)? + "\n";
            Ok(Outcome {
                files: vec![
                    ("panel.csv".into(), csv_bytes(|b| io::write_panel_csv(&panel, b))?),
                    ("covariates.csv".into(), csv_bytes(|b| io::write_covariates_csv(&panel, b))?),
                    ("true_costs.json".into(), costs_json.clone().into_bytes()),
                ],
                report: Report {
                    json: costs_json,
                    ..Report::default()
                },
            })
        }
        _ => bail!("generate config needs exactly one of [population] and [panel]"),
    }
}

#[derive(Debug, Serialize)]
struct FitOutput<'a> {
    estimator: Estimator,
    penalty: PenaltyKind,
    lambda: f64,
    /// Where λ came from: `flag`, `cv`, `support` or `none`.
    lambda_source: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_cv: Option<f64>,
    /// Smallest λ whose LASSO fit uses at most `support` behaviors.
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_support: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cv: Option<&'a CvResult>,
    loss_no_manip: f64,
    loss_manip: f64,
    fit: &'a FitReport,
}

fn run_fit(job: &FitJob, seed: u64) -> Result<Outcome> {
    let costs = load_costs(&job.costs)?;
    let pop = load_population(&job.population, &costs)?;
    let penalty = match job.estimator {
        Estimator::Ols => PenaltyKind::None,
        Estimator::Ridge => PenaltyKind::Ridge,
        Estimator::Lasso => PenaltyKind::Lasso,
        Estimator::Stable => job.penalty,
    };
    if job.estimator != Estimator::Stable && job.penalty != PenaltyKind::None && job.penalty != penalty {
        bail!("--penalty only applies to --estimator stable");
    }
    if job.support.is_some() && matches!(job.estimator, Estimator::Ols | Estimator::Ridge) {
        bail!("--support needs --estimator lasso or stable");
    }

    let mut cv = None;
    let (mut lambda, mut source) = match (penalty, job.lambda) {
        (PenaltyKind::None, Some(_)) => bail!("--lambda given but the fit is unpenalized"),
        (PenaltyKind::None, None) => (0.0, "none"),
        (_, Some(l)) => (l, "flag"),
        (kind, None) => {
            log::info!("choosing {kind} lambda by {}-fold cross-validation", job.folds);
            let res = cross_validate_lambda(&pop, kind, job.folds, seed)?;
            let l = res.lambda;
            cv = Some(res);
            (l, "cv")
        }
    };
    let lambda_cv = cv.as_ref().map(|c| c.lambda);
    let mut lambda_support = None;
    if let (Estimator::Lasso, Some(s)) = (job.estimator, job.support) {
        let floor = lasso_support_lambda(&pop, s)?;
        lambda_support = Some(floor);
        if floor > lambda {
            lambda = floor;
            source = "support";
        }
    }

    let report = match job.estimator {
        Estimator::Ols => fit_ols(&pop)?,
        Estimator::Ridge => fit_ridge(&pop, lambda)?,
        Estimator::Lasso => fit_lasso(&pop, lambda)?,
        Estimator::Stable => {
            let cfg = FitConfig {
                penalty,
                lambda,
                welfare_weight: job.welfare_weight,
                support_limit: job.support,
                optimizer: OptimizerConfig {
                    seed,
                    ..OptimizerConfig::default()
                },
            };
            fit_strategy_robust(&pop, &costs, &cfg)?
        }
    };
    let out = FitOutput {
        estimator: job.estimator,
        penalty,
        lambda,
        lambda_source: source,
        lambda_cv,
        lambda_support,
        cv: cv.as_ref(),
        loss_no_manip: counterfactual_loss(&report.rule, &pop, &costs, false, 0.0)?,
        loss_manip: counterfactual_loss(&report.rule, &pop, &costs, true, 0.0)?,
        fit: &report,
    };
    let rule_csv = csv_bytes(|b| io::write_rules_csv(std::slice::from_ref(&report.rule), b))?;
    let js = json(&out)?;
    Ok(Outcome {
        report: Report {
            csv: Some(String::from_utf8(rule_csv.clone())?),
            md: None,
            json: js.clone(),
        },
        files: vec![("rule.csv".into(), rule_csv), ("fit_report.json".into(), js.into_bytes())],
    })
}

#[derive(Debug, Serialize)]
struct EstimateOutput<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    cv: Option<&'a CostCv>,
    estimate: &'a PrimitivesEstimate,
}

fn run_estimate(job: &EstimateJob, seed: u64) -> Result<Outcome> {
    let panel_text = read(&job.panel)?;
    let cov_text = job.covariates.as_ref().map(read).transpose()?;
    let panel = io::read_panel(panel_text.as_bytes(), cov_text.as_ref().map(|s| s.as_bytes()))
        .with_context(|| format!("in {}", job.panel.display()))?;
    let (n, t) = panel.shape();
    log::info!("panel with {n} agents over {t} weeks and {} behaviors", panel.dim());

    let mut opts = job.options;
    let mut cv = None;
    if let Some(spec) = &job.cv {
        log::info!(
            "cross-validating {} penalty pairs over {} folds",
            spec.diag_grid.len() * spec.offdiag_grid.len(),
            spec.folds
        );
        let res = cv_lambda_costs(&panel, &opts, spec.folds, seed, &spec.diag_grid, &spec.offdiag_grid)?;
        opts.lambda_diag = res.lambda_diag;
        opts.lambda_offdiag = res.lambda_offdiag;
        cv = Some(res);
    }
    let est = fit_primitives(&panel, &opts)?;
    if est.excluded_terms > 0 {
        log::warn!("{} moment terms had a zero divisor and were left out", est.excluded_terms);
    }
    let costs_json = io::cost_model_to_json(&est.cost_model()?)? + "\n";
    let js = json(&EstimateOutput {
        cv: cv.as_ref(),
        estimate: &est,
    })?;
    Ok(Outcome {
        files: vec![
            ("costs.json".into(), costs_json.into_bytes()),
            ("bliss.csv".into(), csv_bytes(|b| io::write_bliss_csv(&est, b))?),
            ("week_effects.csv".into(), csv_bytes(|b| io::write_week_effects_csv(&est, b))?),
            ("estimate.json".into(), js.clone().into_bytes()),
        ],
        report: Report {
            json: js,
            ..Report::default()
        },
    })
}

#[derive(Debug, Serialize)]
struct RuleMetrics {
    name: String,
    /// Squared error under the requested behavior plus the welfare term.
    loss: f64,
    loss_no_manip: f64,
    loss_manip: f64,
    rmse: f64,
    mean_manipulation_cost: f64,
}

#[derive(Debug, Serialize)]
struct Transparency {
    naive: String,
    robust: String,
    #[serde(flatten)]
    bounds: TransparencyBounds,
}

#[derive(Debug, Serialize)]
struct Metrics {
    manipulated: bool,
    welfare_weight: f64,
    n_agents: usize,
    rules: Vec<RuleMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    transparency: Option<Transparency>,
}

fn first_rule(path: &PathBuf) -> Result<Vec<DecisionRule>> {
    let rules = io::read_rules_csv(read(path)?.as_bytes()).with_context(|| format!("in {}", path.display()))?;
    if rules.is_empty() {
        bail!("{} holds no rules", path.display());
    }
    Ok(rules)
}

fn run_evaluate(job: &EvaluateJob) -> Result<Outcome> {
    let costs = load_costs(&job.costs)?;
    let pop = load_population(&job.population, &costs)?;
    let rules = first_rule(&job.rule)?;
    let mut metrics = Vec::new();
    for r in &rules {
        let parts = loss_parts(r, &pop, &costs, job.manipulated)?;
        let loss = parts.squared_error + job.welfare_weight * parts.manipulation_cost;
        metrics.push(RuleMetrics {
            name: r.label.clone(),
            loss,
            loss_no_manip: counterfactual_loss(r, &pop, &costs, false, 0.0)?,
            loss_manip: counterfactual_loss(r, &pop, &costs, true, 0.0)?,
            rmse: parts.squared_error.sqrt(),
            mean_manipulation_cost: parts.manipulation_cost,
        });
    }
    let transparency = match &job.transparency {
        Some(path) => {
            let naive = first_rule(path)?.swap_remove(0);
            let robust = &rules[0];
            Some(Transparency {
                naive: naive.label.clone(),
                robust: robust.label.clone(),
                bounds: transparency_cost(&pop, &costs, &naive, robust, None)?,
            })
        }
        None => None,
    };
    let js = json(&Metrics {
        manipulated: job.manipulated,
        welfare_weight: job.welfare_weight,
        n_agents: pop.len(),
        rules: metrics,
        transparency,
    })?;
    Ok(Outcome {
        files: vec![("metrics.json".into(), js.clone().into_bytes())],
        report: Report {
            json: js,
            ..Report::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn job_snapshot_round_trips() {
        let job = Job::EstimateCosts(EstimateJob {
            panel: "p.csv".into(),
            covariates: None,
            options: GmmOptions {
                lambda_offdiag: f64::INFINITY,
                ..GmmOptions::default()
            },
            cv: Some(CostCvSpec {
                folds: 5,
                diag_grid: vec![0.0, 0.1],
                offdiag_grid: vec![1.0, f64::INFINITY],
            }),
        });
        let s = serde_json::to_string(&job).unwrap();
        assert!(s.contains("\"subcommand\":\"estimate-costs\""));
        let back: Job = serde_json::from_str(&s).unwrap();
        assert_eq!(back, job);
    }

    #[test]
    fn generate_needs_one_section() {
        let cfg = GenerateConfig {
            population: None,
            panel: None,
        };
        assert!(run_generate(&cfg).is_err());
    }
}
