use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{default_feature_names, Agent, CostModel, Population, SYMMETRY_TOLERANCE};

/// How base gaming ability γᵢ is assigned to agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum GammaRule {
    Constant { value: f64 },
    /// `low` when bliss behavior `feature` is at most `cut`, otherwise `high`.
    Threshold { feature: usize, cut: f64, low: f64, high: f64 },
    /// `u_weight·u − noise_cube_weight·e³ + B` with `u ~ N(0,1)` and `e` the
    /// agent's outcome noise; `B` shifts the population so that its smallest
    /// ability equals `min_gaming`.
    Formula {
        u_weight: f64,
        noise_cube_weight: f64,
        min_gaming: f64,
    },
    /// `1/γᵢ ~ Uniform(low, high]`.
    InverseUniform { low: f64, high: f64 },
}

impl GammaRule {
    fn validate(&self, k: usize) -> Result<()> {
        match *self {
            GammaRule::Constant { value } if !(value >= 0.0) => {
                Err(Error::InvalidInput(format!("constant gaming must be >= 0, got {value}")))
            }
            GammaRule::Threshold { feature, low, high, .. } => {
                if feature >= k {
                    Err(Error::InvalidInput(format!("threshold feature {feature} out of range for K={k}")))
                } else if !(low >= 0.0 && high >= 0.0) {
                    Err(Error::InvalidInput("threshold gaming levels must be >= 0".into()))
                } else {
                    Ok(())
                }
            }
            GammaRule::InverseUniform { low, high } if !(low >= 0.0 && high > low) => Err(Error::InvalidInput(
                format!("inverse-uniform bounds need 0 <= low < high, got [{low}, {high}]"),
            )),
            _ => Ok(()),
        }
    }
}

/// Costs given either as the cost matrix C or directly as C⁻¹.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CostSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inv_cost: Option<Vec<Vec<f64>>>,
}

impl CostSpec {
    pub fn from_cost(c: Vec<Vec<f64>>) -> Self {
        Self {
            cost: Some(c),
            inv_cost: None,
        }
    }

    pub fn to_model(&self) -> Result<CostModel> {
        match (&self.cost, &self.inv_cost) {
            (Some(c), None) => CostModel::from_cost_matrix(square(c, "cost")?),
            (None, Some(ci)) => CostModel::new(square(ci, "inv_cost")?),
            _ => Err(Error::InvalidInput("give exactly one of `cost` and `inv_cost`".into())),
        }
    }
}

pub(crate) fn square(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let k = rows.len();
    if k == 0 || rows.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidInput(format!("{what} must be a non-empty square matrix")));
    }
    Ok(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
}

pub(crate) fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn default_agents() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub b0: f64,
    pub b: Vec<f64>,
    /// Mean of bliss behaviors; zeros when omitted.
    #[serde(default)]
    pub bliss_mean: Option<Vec<f64>>,
    pub bliss_cov: Vec<Vec<f64>>,
    pub cost: CostSpec,
    pub gamma: GammaRule,
    pub noise_sigma: f64,
    #[serde(default = "default_agents")]
    pub n_agents: usize,
    #[serde(default)]
    pub seed: u64,
}

impl DgpConfig {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.dim();
        if k == 0 {
            return Err(Error::InvalidInput("b must be non-empty".into()));
        }
        let cov = square(&self.bliss_cov, "bliss_cov")?;
        if cov.nrows() != k {
            return Err(Error::dim("bliss_cov vs b", k, cov.nrows()));
        }
        if let Some(m) = &self.bliss_mean {
            if m.len() != k {
                return Err(Error::dim("bliss_mean vs b", k, m.len()));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidInput(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.n_agents == 0 {
            return Err(Error::InvalidInput("n_agents must be positive".into()));
        }
        let costs = self.cost.to_model()?;
        if costs.dim() != k {
            return Err(Error::dim("cost matrix vs b", k, costs.dim()));
        }
        self.gamma.validate(k)
    }

    pub fn cost_model(&self) -> Result<CostModel> {
        self.cost.to_model()
    }

    pub fn true_rule(&self) -> Result<crate::model::DecisionRule> {
        crate::model::DecisionRule::new(self.b0, self.b.clone(), "b_dgp")
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Factor `L` with `L Lᵀ = cov`: Cholesky, or a symmetric eigen square root
/// for singular PSD matrices.
pub(crate) fn covariance_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let asym = (cov - cov.transpose()).abs().max();
    if asym > SYMMETRY_TOLERANCE {
        return Err(Error::NotPsd(format!("covariance is not symmetric (asymmetry {asym:e})")));
    }
    if let Some(ch) = cov.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = cov.clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(Error::NotPsd(format!("eigenvalues {:?}", eig.eigenvalues.as_slice())));
    }
    let root = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root))
}

/// Draws a population: per agent the K bliss normals, then the outcome
/// noise, then whatever the gamma rule needs. The generator is ChaCha20
/// seeded from `cfg.seed`.
pub fn generate_population(cfg: &DgpConfig) -> Result<Population> {
    cfg.validate()?;
    let k = cfg.dim();
    let factor = covariance_factor(&square(&cfg.bliss_cov, "bliss_cov")?)?;
    let mean = cfg.bliss_mean.clone().unwrap_or_else(|| vec![0.0; k]);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);

    let mut rows = Vec::with_capacity(cfg.n_agents);
    for _ in 0..cfg.n_agents {
        let z = DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x: Vec<f64> = (&factor * z).iter().zip(&mean).map(|(a, m)| a + m).collect();
        let e = cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
        let y = cfg.b0 + x.iter().zip(&cfg.b).map(|(a, b)| a * b).sum::<f64>() + e;
        let g = match cfg.gamma {
            GammaRule::Constant { value } => value,
            GammaRule::Threshold { feature, cut, low, high } => {
                if x[feature] <= cut {
                    low
                } else {
                    high
                }
            }
            GammaRule::Formula {
                u_weight,
                noise_cube_weight,
                ..
            } => {
                let u: f64 = rng.sample(StandardNormal);
                u_weight * u - noise_cube_weight * e.powi(3)
            }
            GammaRule::InverseUniform { low, high } => {
                let u: f64 = rng.random();
                // (low, high], so the ability stays finite
                1.0 / (high - (high - low) * u)
            }
        };
        rows.push((x, g, y));
    }
    if let GammaRule::Formula { min_gaming, .. } = cfg.gamma {
        let lowest = rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
        let shift = min_gaming - lowest;
        for r in rows.iter_mut() {
            r.1 += shift;
        }
    }
    let agents = rows
        .into_iter()
        .map(|(x, g, y)| Agent::new(x, g, vec![], y))
        .collect::<Result<Vec<_>>>()?;
    Population::new(agents, default_feature_names(k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::presets;

    #[test]
    fn same_seed_same_population() {
        let cfg = presets::table1().with_seed(5);
        let cfg = DgpConfig { n_agents: 50, ..cfg };
        let a = generate_population(&cfg).unwrap();
        let b = generate_population(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_population(&cfg.with_seed(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_truth_has_zero_loss() {
        let cfg = DgpConfig {
            noise_sigma: 0.0,
            n_agents: 200,
            ..presets::table1()
        };
        let pop = generate_population(&cfg).unwrap();
        let l = crate::model::counterfactual_loss(&cfg.true_rule().unwrap(), &pop, &cfg.cost_model().unwrap(), false, 0.0)
            .unwrap();
        assert!(l < 1e-24);
    }

    #[test]
    fn table1_sample_covariance() {
        let cfg = presets::table1().with_seed(1);
        let pop = generate_population(&cfg).unwrap();
        let n = pop.len() as f64;
        for i in 0..3 {
            for j in 0..3 {
                let mi = pop.agents().iter().map(|a| a.bliss[i]).sum::<f64>() / n;
                let mj = pop.agents().iter().map(|a| a.bliss[j]).sum::<f64>() / n;
                let c = pop.agents().iter().map(|a| (a.bliss[i] - mi) * (a.bliss[j] - mj)).sum::<f64>() / n;
                assert!((c - cfg.bliss_cov[i][j]).abs() < 0.05, "cov[{i}][{j}] = {c}");
            }
        }
    }

    #[test]
    fn threshold_fraction_matches_normal_tail() {
        let cfg = presets::table1().with_seed(2);
        let pop = generate_population(&cfg).unwrap();
        let frac = pop.agents().iter().filter(|a| a.gaming == 10.0).count() as f64 / pop.len() as f64;
        // P(N(0,1) > 0.2)
        let expected = 0.420_740_290_560_897;
        assert!((frac - expected).abs() < 0.015, "{frac}");
    }

    #[test]
    fn formula_rule_hits_min_gaming() {
        let cfg = DgpConfig {
            n_agents: 500,
            ..presets::table_a2()
        };
        let pop = generate_population(&cfg).unwrap();
        let min = pop.agents().iter().map(|a| a.gaming).fold(f64::INFINITY, f64::min);
        assert!((min - 0.1).abs() < 1e-12);
    }

    #[test]
    fn singular_psd_covariance_is_accepted_and_indefinite_rejected() {
        let psd = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = covariance_factor(&psd).unwrap();
        assert!((&l * l.transpose() - &psd).abs().max() < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(covariance_factor(&bad), Err(Error::NotPsd(_))));
    }
}
