use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::default_feature_names;

/// One person-week.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelObservation {
    pub agent_id: String,
    pub week: i64,
    pub opted_in: bool,
    /// Incentive vector of the rule the agent faced that week.
    pub beta: Vec<f64>,
    /// Observed behaviors.
    pub x: Vec<f64>,
}

impl PanelObservation {
    pub fn is_control(&self) -> bool {
        self.beta.iter().all(|b| *b == 0.0)
    }

    /// More than one behavior incentivized at once.
    pub fn is_complex(&self) -> bool {
        self.beta.iter().filter(|b| **b != 0.0).count() > 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    pub feature_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub observations: Vec<PanelObservation>,
    /// Observables zᵢ by agent id.
    pub covariates: BTreeMap<String, Vec<f64>>,
}

impl PanelDataset {
    pub fn new(
        feature_names: Vec<String>,
        covariate_names: Vec<String>,
        observations: Vec<PanelObservation>,
        covariates: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self> {
        let panel = Self {
            feature_names,
            covariate_names,
            observations,
            covariates,
        };
        panel.validate()?;
        Ok(panel)
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.dim();
        if k == 0 {
            return Err(Error::InvalidInput("panel has no behaviors".into()));
        }
        let p = self.covariate_dim();
        let mut seen = BTreeSet::new();
        for o in &self.observations {
            if o.beta.len() != k {
                return Err(Error::dim("panel incentive vector", k, o.beta.len()));
            }
            if o.x.len() != k {
                return Err(Error::dim("panel behavior vector", k, o.x.len()));
            }
            if o.beta.iter().chain(&o.x).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("panel row for agent {} week {}", o.agent_id, o.week)));
            }
            if !seen.insert((o.agent_id.as_str(), o.week)) {
                return Err(Error::InvalidInput(format!(
                    "duplicate observation for agent {} in week {}",
                    o.agent_id, o.week
                )));
            }
            if p > 0 && !self.covariates.contains_key(&o.agent_id) {
                return Err(Error::InvalidInput(format!("no covariates for agent {}", o.agent_id)));
            }
        }
        for (id, z) in &self.covariates {
            if z.len() != p {
                return Err(Error::InvalidInput(format!(
                    "agent {id} has {} covariates, expected {p}",
                    z.len()
                )));
            }
        }
        Ok(())
    }

    /// Number of distinct agents and weeks among opted-in observations.
    pub fn shape(&self) -> (usize, usize) {
        let agents: BTreeSet<_> = self.observations.iter().filter(|o| o.opted_in).map(|o| &o.agent_id).collect();
        let weeks: BTreeSet<_> = self.observations.iter().filter(|o| o.opted_in).map(|o| o.week).collect();
        (agents.len(), weeks.len())
    }

    /// Panel with only the given agents.
    pub fn restrict_agents(&self, keep: &BTreeSet<String>) -> Self {
        Self {
            feature_names: self.feature_names.clone(),
            covariate_names: self.covariate_names.clone(),
            observations: self
                .observations
                .iter()
                .filter(|o| keep.contains(&o.agent_id))
                .cloned()
                .collect(),
            covariates: self
                .covariates
                .iter()
                .filter(|(id, _)| keep.contains(*id))
                .map(|(a, b)| (a.clone(), b.clone()))
                .collect(),
        }
    }
}

fn half() -> f64 {
    0.5
}

fn default_levels() -> Vec<f64> {
    vec![1.0, 2.0]
}

/// Synthetic incentivized panel. Week 0 is a control week for every agent;
/// afterwards each person-week is a control with probability
/// `control_share`, otherwise one uniformly chosen behavior is incentivized
/// at a uniformly chosen level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDgp {
    pub n_agents: usize,
    pub n_weeks: usize,
    pub inv_cost: Vec<Vec<f64>>,
    /// Loadings on binary observables, each drawn as Bernoulli(1/2).
    #[serde(default)]
    pub omega: Vec<f64>,
    pub noise_sigma: f64,
    /// Standard deviation of the unobserved gaming shock vᵢ.
    #[serde(default)]
    pub shock_sd: f64,
    #[serde(default = "half")]
    pub control_share: f64,
    #[serde(default = "default_levels")]
    pub incentive_levels: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

/// Ground truth behind a synthetic panel, indexed by agent and week order.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelTruth {
    pub bliss: Vec<Vec<f64>>,
    pub week_effects: Vec<Vec<f64>>,
    pub gaming: Vec<f64>,
    pub shocks: Vec<f64>,
}

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn agent_label(i: usize) -> String {
    format!("a{i:05}")
}

pub fn generate_panel(dgp: &PanelDgp) -> Result<(PanelDataset, PanelTruth)> {
    let k = dgp.inv_cost.len();
    if k == 0 || dgp.inv_cost.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidInput("inv_cost must be square and non-empty".into()));
    }
    if dgp.n_agents == 0 || dgp.n_weeks == 0 {
        return Err(Error::InvalidInput("panel needs agents and weeks".into()));
    }
    if dgp.incentive_levels.is_empty() || !(0.0..=1.0).contains(&dgp.control_share) {
        return Err(Error::InvalidInput("need incentive levels and a control share in [0, 1]".into()));
    }
    let s = DMatrix::from_fn(k, k, |i, j| dgp.inv_cost[i][j]);
    let p = dgp.omega.len();
    let mut rng = ChaCha20Rng::seed_from_u64(dgp.seed);

    let mut mu: Vec<Vec<f64>> = (0..dgp.n_weeks).map(|_| (0..k).map(|_| normal(&mut rng)).collect()).collect();
    for j in 0..k {
        let m = mu.iter().map(|r| r[j]).sum::<f64>() / dgp.n_weeks as f64;
        mu.iter_mut().for_each(|r| r[j] -= m);
    }

    let mut covariates = BTreeMap::new();
    let mut bliss = Vec::with_capacity(dgp.n_agents);
    let mut gaming = Vec::with_capacity(dgp.n_agents);
    let mut shocks = Vec::with_capacity(dgp.n_agents);
    let mut observations = Vec::with_capacity(dgp.n_agents * dgp.n_weeks);
    for i in 0..dgp.n_agents {
        let id = agent_label(i);
        let z: Vec<f64> = (0..p).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let xb: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
        let v = dgp.shock_sd * normal(&mut rng);
        let observed = (-dgp.omega.iter().zip(&z).map(|(w, z)| w * z).sum::<f64>()).exp();
        let g = (observed + v).max(0.0);
        for (t, mu_t) in mu.iter().enumerate() {
            let mut beta = vec![0.0; k];
            if t > 0 && rng.random::<f64>() >= dgp.control_share {
                let which = rng.random_range(0..k);
                beta[which] = dgp.incentive_levels[rng.random_range(0..dgp.incentive_levels.len())];
            }
            let shift = &s * nalgebra::DVector::from_column_slice(&beta);
            let x = (0..k)
                .map(|j| xb[j] + mu_t[j] + g * shift[j] + dgp.noise_sigma * normal(&mut rng))
                .collect();
            observations.push(PanelObservation {
                agent_id: id.clone(),
                week: t as i64,
                opted_in: true,
                beta,
                x,
            });
        }
        covariates.insert(id, z);
        bliss.push(xb);
        gaming.push(g);
        shocks.push(v);
    }
    let panel = PanelDataset::new(
        default_feature_names(k),
        (1..=p).map(|j| format!("z_{j}")).collect(),
        observations,
        covariates,
    )?;
    Ok((
        panel,
        PanelTruth {
            bliss,
            week_effects: mu,
            gaming,
            shocks,
        },
    ))
}
