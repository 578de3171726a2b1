//! The behavioral game: agents with bliss behaviors and gaming ability,
//! quadratic manipulation costs, linear decision rules and best responses.
//!
//! Agent `i` facing rule `ŷ(x) = β₀ + β'x` moves from its bliss behavior
//! `x̲ᵢ` to `x̲ᵢ + γᵢ C⁻¹ β`, paying `½ γᵢ β'C⁻¹β`. Costs are stored through
//! the inverse matrix `C⁻¹`; the cost-unit view `C` only exists when `C⁻¹`
//! is invertible.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Largest asymmetry `|M - M'|` accepted before symmetrizing an inverse cost matrix.
pub const SYMMETRY_TOLERANCE: f64 = 1e-8;

/// Linear decision rule `ŷ(x) = β₀ + β'x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRule {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    /// Provenance, e.g. `"ols"` or `"stable(lasso, lambda=0.1)"`.
    pub label: String,
}

impl DecisionRule {
    pub fn new(intercept: f64, coefficients: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        ensure_finite("decision rule intercept", &[intercept])?;
        ensure_finite("decision rule coefficients", &coefficients)?;
        Ok(Self {
            intercept,
            coefficients,
            label: label.into(),
        })
    }

    /// Rule with intercept `c` and all slopes zero.
    pub fn constant(c: f64, k: usize, label: impl Into<String>) -> Self {
        Self {
            intercept: c,
            coefficients: vec![0.0; k],
            label: label.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.coefficients.len()
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Intercept followed by slopes.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim() + 1);
        v.push(self.intercept);
        v.extend_from_slice(&self.coefficients);
        v
    }
}

/// Manipulation-cost primitives: `C⁻¹`, loadings `ω` on observables, and
/// the empirical distribution `V` of unobserved gaming shocks.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    inv_cost: DMatrix<f64>,
    omega: Vec<f64>,
    gaming_shocks: Vec<f64>,
    feature_names: Vec<String>,
}

impl CostModel {
    /// Builds a cost model from `C⁻¹`. Inputs within [`SYMMETRY_TOLERANCE`] of
    /// symmetric are symmetrized; diagonal entries must be strictly positive.
    pub fn new(inv_cost: DMatrix<f64>) -> Result<Self> {
        let k = inv_cost.nrows();
        if inv_cost.ncols() != k {
            return Err(Error::dim("inverse cost matrix (square)", k, inv_cost.ncols()));
        }
        if k == 0 {
            return Err(Error::InvalidInput("inverse cost matrix is empty".into()));
        }
        ensure_finite("inverse cost matrix", inv_cost.as_slice())?;
        let asym = (&inv_cost - inv_cost.transpose()).abs().max();
        if asym > SYMMETRY_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "inverse cost matrix is not symmetric (max |M - M'| = {asym:e})"
            )));
        }
        let sym = (&inv_cost + inv_cost.transpose()) * 0.5;
        for j in 0..k {
            if sym[(j, j)] <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "inverse cost diagonal entry {j} must be positive, got {}",
                    sym[(j, j)]
                )));
            }
        }
        Ok(Self {
            inv_cost: sym,
            omega: Vec::new(),
            gaming_shocks: Vec::new(),
            feature_names: default_feature_names(k),
        })
    }

    /// Builds a cost model from the cost-unit matrix `C` (must be invertible).
    pub fn from_cost_matrix(cost: DMatrix<f64>) -> Result<Self> {
        let k = cost.nrows();
        if cost.ncols() != k {
            return Err(Error::dim("cost matrix (square)", k, cost.ncols()));
        }
        let sym = (&cost + cost.transpose()) * 0.5;
        let inv = sym
            .try_inverse()
            .ok_or_else(|| Error::InvalidInput("cost matrix is singular".into()))?;
        Self::new((&inv + inv.transpose()) * 0.5)
    }

    pub fn with_omega(mut self, omega: Vec<f64>) -> Result<Self> {
        ensure_finite("omega", &omega)?;
        self.omega = omega;
        Ok(self)
    }

    pub fn with_gaming_shocks(mut self, shocks: Vec<f64>) -> Result<Self> {
        ensure_finite("gaming shocks", &shocks)?;
        self.gaming_shocks = shocks;
        Ok(self)
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.dim() {
            return Err(Error::dim("cost model feature names", self.dim(), names.len()));
        }
        self.feature_names = names;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.inv_cost.nrows()
    }

    pub fn inv_cost(&self) -> &DMatrix<f64> {
        &self.inv_cost
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn gaming_shocks(&self) -> &[f64] {
        &self.gaming_shocks
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// The cost-unit matrix `C`, when `C⁻¹` is invertible.
    pub fn cost_matrix(&self) -> Option<DMatrix<f64>> {
        self.inv_cost.clone().try_inverse()
    }

    /// Same model with `C⁻¹` multiplied by `factor` (gaming made uniformly easier).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::InvalidInput(format!("cost scale factor must be positive, got {factor}")));
        }
        let mut out = self.clone();
        out.inv_cost *= factor;
        Ok(out)
    }

    /// Sub-model on the given feature indices.
    pub fn restricted(&self, idx: &[usize]) -> Result<Self> {
        let k = idx.len();
        let sub = DMatrix::from_fn(k, k, |a, b| self.inv_cost[(idx[a], idx[b])]);
        let names = idx.iter().map(|&j| self.feature_names[j].clone()).collect();
        Ok(CostModel {
            inv_cost: sub,
            omega: self.omega.clone(),
            gaming_shocks: self.gaming_shocks.clone(),
            feature_names: names,
        })
    }

    /// Observable part of gaming ability, `exp(-ω·z)`. An empty `ω` means zero loadings.
    pub fn observed_gaming(&self, z: &[f64]) -> Result<f64> {
        if self.omega.is_empty() {
            return Ok(1.0);
        }
        if self.omega.len() != z.len() {
            return Err(Error::dim("observables vs omega", self.omega.len(), z.len()));
        }
        let dot: f64 = self.omega.iter().zip(z).map(|(w, z)| w * z).sum();
        Ok((-dot).exp())
    }

    /// Realized gaming abilities for an agent with base ability `base`: the
    /// base itself when `V` is empty, otherwise `max(0, base + v)` for each `v ∈ V`.
    pub fn gaming_draws(&self, base: f64) -> GamingDraws<'_> {
        GamingDraws {
            base,
            shocks: &self.gaming_shocks,
            pos: 0,
        }
    }

    /// Mean of `γ` and of `γ²` over the gaming draws for an agent.
    pub fn gaming_moments(&self, base: f64) -> (f64, f64) {
        let mut n = 0usize;
        let (mut s1, mut s2) = (0.0, 0.0);
        for g in self.gaming_draws(base) {
            n += 1;
            s1 += g;
            s2 += g * g;
        }
        (s1 / n as f64, s2 / n as f64)
    }

    /// `C⁻¹β`, the behavior shift of an agent with unit gaming ability.
    pub fn shift(&self, beta: &[f64]) -> Result<DVector<f64>> {
        if beta.len() != self.dim() {
            return Err(Error::dim("rule vs cost model", self.dim(), beta.len()));
        }
        Ok(&self.inv_cost * DVector::from_column_slice(beta))
    }
}

/// Iterator over realized gaming abilities. See [`CostModel::gaming_draws`].
pub struct GamingDraws<'a> {
    base: f64,
    shocks: &'a [f64],
    pos: usize,
}

impl Iterator for GamingDraws<'_> {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        if self.shocks.is_empty() {
            if self.pos == 0 {
                self.pos = 1;
                return Some(self.base.max(0.0));
            }
            return None;
        }
        let v = *self.shocks.get(self.pos)?;
        self.pos += 1;
        Some((self.base + v).max(0.0))
    }
}

pub fn default_feature_names(k: usize) -> Vec<String> {
    (1..=k).map(|j| format!("x_{j}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub bliss: Vec<f64>,
    pub gaming: f64,
    pub observables: Vec<f64>,
    pub outcome: f64,
}

impl Agent {
    /// Negative gaming ability is clamped to zero.
    pub fn new(bliss: Vec<f64>, gaming: f64, observables: Vec<f64>, outcome: f64) -> Result<Self> {
        ensure_finite("agent bliss behavior", &bliss)?;
        ensure_finite("agent outcome", &[outcome])?;
        ensure_finite("agent observables", &observables)?;
        if gaming.is_nan() {
            return Err(Error::NonFinite("agent gaming ability".into()));
        }
        Ok(Self {
            bliss,
            gaming: gaming.max(0.0),
            observables,
            outcome,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    agents: Vec<Agent>,
    feature_names: Vec<String>,
}

impl Population {
    pub fn new(agents: Vec<Agent>, feature_names: Vec<String>) -> Result<Self> {
        let k = feature_names.len();
        let p = agents.first().map(|a| a.observables.len()).unwrap_or(0);
        for a in &agents {
            if a.bliss.len() != k {
                return Err(Error::dim("agent behavior vs feature names", k, a.bliss.len()));
            }
            if a.observables.len() != p {
                return Err(Error::dim("agent observables", p, a.observables.len()));
            }
        }
        Ok(Self {
            agents,
            feature_names,
        })
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn observable_dim(&self) -> usize {
        self.agents.first().map(|a| a.observables.len()).unwrap_or(0)
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.agents.iter().map(|a| a.outcome).collect()
    }

    /// Population whose gaming abilities are `exp(-ω·zᵢ)` under `costs`.
    pub fn with_observed_gaming(&self, costs: &CostModel) -> Result<Self> {
        let agents = self
            .agents
            .iter()
            .map(|a| {
                let g = costs.observed_gaming(&a.observables)?;
                Ok(Agent {
                    gaming: g.max(0.0),
                    ..a.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            agents,
            feature_names: self.feature_names.clone(),
        })
    }

    /// Population restricted to the given agent indices (in that order).
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            agents: idx.iter().map(|&i| self.agents[i].clone()).collect(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Population restricted to a subset of features.
    pub fn select_features(&self, idx: &[usize]) -> Self {
        Self {
            agents: self
                .agents
                .iter()
                .map(|a| Agent {
                    bliss: idx.iter().map(|&j| a.bliss[j]).collect(),
                    ..a.clone()
                })
                .collect(),
            feature_names: idx.iter().map(|&j| self.feature_names[j].clone()).collect(),
        }
    }

    /// Population whose bliss behaviors are replaced by the best responses to `rule`
    /// (outcomes and gaming unchanged).
    pub fn manipulated(&self, rule: &DecisionRule, costs: &CostModel) -> Result<Self> {
        let agents = self
            .agents
            .iter()
            .map(|a| {
                Ok(Agent {
                    bliss: best_response(a, rule, costs)?,
                    ..a.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            agents,
            feature_names: self.feature_names.clone(),
        })
    }
}

fn check_dims(agent: &Agent, rule: &DecisionRule, costs: &CostModel) -> Result<()> {
    let k = costs.dim();
    if rule.dim() != k {
        return Err(Error::dim("decision rule vs cost model", k, rule.dim()));
    }
    if agent.bliss.len() != k {
        return Err(Error::dim("agent behavior vs cost model", k, agent.bliss.len()));
    }
    Ok(())
}

pub fn predict(rule: &DecisionRule, x: &[f64]) -> Result<f64> {
    if x.len() != rule.dim() {
        return Err(Error::dim("behavior vs decision rule", rule.dim(), x.len()));
    }
    Ok(rule.intercept + dot(&rule.coefficients, x))
}

/// `x̲ᵢ + γᵢ C⁻¹β`.
pub fn best_response(agent: &Agent, rule: &DecisionRule, costs: &CostModel) -> Result<Vec<f64>> {
    check_dims(agent, rule, costs)?;
    if agent.gaming == 0.0 || rule.coefficients.iter().all(|&b| b == 0.0) {
        return Ok(agent.bliss.clone());
    }
    let shift = costs.shift(&rule.coefficients)?;
    Ok(agent
        .bliss
        .iter()
        .zip(shift.iter())
        .map(|(x, s)| x + agent.gaming * s)
        .collect())
}

/// `½ γᵢ β'C⁻¹β`, the cost paid at the best response.
pub fn manipulation_cost_at_best_response(
    agent: &Agent,
    rule: &DecisionRule,
    costs: &CostModel,
) -> Result<f64> {
    check_dims(agent, rule, costs)?;
    let q = quadratic_incentive(rule, costs)?;
    Ok(0.5 * agent.gaming * q)
}

/// Utility `ŷ(x*) - c(x*, x̲)` at the best response.
pub fn agent_utility(agent: &Agent, rule: &DecisionRule, costs: &CostModel) -> Result<f64> {
    let x = best_response(agent, rule, costs)?;
    Ok(predict(rule, &x)? - manipulation_cost_at_best_response(agent, rule, costs)?)
}

/// Utility of choosing an arbitrary behavior `x`, using the cost-unit matrix
/// `Cᵢ = C / γᵢ`. Requires `C⁻¹` invertible and `γᵢ > 0`.
pub fn utility_at(agent: &Agent, rule: &DecisionRule, costs: &CostModel, x: &[f64]) -> Result<f64> {
    check_dims(agent, rule, costs)?;
    let cost = costs
        .cost_matrix()
        .ok_or_else(|| Error::InvalidInput("inverse cost matrix is singular".into()))?;
    if agent.gaming <= 0.0 {
        return Err(Error::InvalidInput("utility_at needs positive gaming ability".into()));
    }
    let d = DVector::from_iterator(x.len(), x.iter().zip(&agent.bliss).map(|(a, b)| a - b));
    let c = 0.5 * d.dot(&(&cost * &d)) / agent.gaming;
    Ok(predict(rule, x)? - c)
}

/// `β'C⁻¹β`.
pub fn quadratic_incentive(rule: &DecisionRule, costs: &CostModel) -> Result<f64> {
    let shift = costs.shift(&rule.coefficients)?;
    Ok(dot(&rule.coefficients, shift.as_slice()))
}

/// Mean squared error of `rule` over the population, with behaviors at bliss
/// (`manipulated = false`) or at best responses, plus `welfare_weight` times
/// the mean manipulation cost. Gaming draws from the cost model's shock
/// distribution are averaged per agent.
pub fn counterfactual_loss(
    rule: &DecisionRule,
    pop: &Population,
    costs: &CostModel,
    manipulated: bool,
    welfare_weight: f64,
) -> Result<f64> {
    let parts = loss_parts(rule, pop, costs, manipulated)?;
    Ok(parts.squared_error + welfare_weight * parts.manipulation_cost)
}

/// The two terms that make up [`counterfactual_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub squared_error: f64,
    pub manipulation_cost: f64,
}

pub fn loss_parts(
    rule: &DecisionRule,
    pop: &Population,
    costs: &CostModel,
    manipulated: bool,
) -> Result<LossParts> {
    let k = costs.dim();
    if rule.dim() != k {
        return Err(Error::dim("decision rule vs cost model", k, rule.dim()));
    }
    if pop.dim() != k {
        return Err(Error::dim("population vs cost model", k, pop.dim()));
    }
    if pop.is_empty() {
        return Err(Error::InvalidInput("empty population".into()));
    }
    let q = quadratic_incentive(rule, costs)?;
    let mut sq = 0.0;
    let mut mc = 0.0;
    for a in pop.agents() {
        let base = a.outcome - rule.intercept - dot(&rule.coefficients, &a.bliss);
        if manipulated {
            let mut n = 0usize;
            let (mut s, mut c) = (0.0, 0.0);
            for g in costs.gaming_draws(a.gaming) {
                let r = base - g * q;
                s += r * r;
                c += 0.5 * g * q;
                n += 1;
            }
            sq += s / n as f64;
            mc += c / n as f64;
        } else {
            sq += base * base;
            let (g1, _) = costs.gaming_moments(a.gaming);
            mc += 0.5 * g1 * q;
        }
    }
    let n = pop.len() as f64;
    Ok(LossParts {
        squared_error: sq / n,
        manipulation_cost: mc / n,
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fig1_costs() -> CostModel {
        CostModel::from_cost_matrix(DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 32.0])).unwrap()
    }

    fn agent(bliss: Vec<f64>, gaming: f64) -> Agent {
        Agent::new(bliss, gaming, vec![], 0.0).unwrap()
    }

    #[test]
    fn zero_incentive_returns_bliss() {
        let a = agent(vec![0.3, -1.7], 4.0);
        let rule = DecisionRule::constant(2.0, 2, "c");
        assert_eq!(best_response(&a, &rule, &fig1_costs()).unwrap(), a.bliss);
        assert_eq!(manipulation_cost_at_best_response(&a, &rule, &fig1_costs()).unwrap(), 0.0);
        assert_eq!(agent_utility(&a, &rule, &fig1_costs()).unwrap(), 2.0);
    }

    #[test]
    fn fig1_example_values() {
        let a = agent(vec![0.0, 0.0], 1.0);
        let rule = DecisionRule::new(0.0, vec![1.0, 1.0], "r").unwrap();
        let c = fig1_costs();
        let x = best_response(&a, &rule, &c).unwrap();
        assert_relative_eq!(x[0], 0.25, epsilon = 1e-15);
        assert_relative_eq!(x[1], 0.03125, epsilon = 1e-15);
        let cost = manipulation_cost_at_best_response(&a, &rule, &c).unwrap();
        assert_relative_eq!(cost, 0.140625, epsilon = 1e-15);
        // quadratic form at the deviation
        let d = DVector::from_vec(x.clone());
        let cm = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 32.0]);
        assert_relative_eq!(0.5 * d.dot(&(&cm * &d)), cost, epsilon = 1e-15);
        assert_relative_eq!(predict(&rule, &x).unwrap(), 0.28125, epsilon = 1e-15);
        assert_relative_eq!(agent_utility(&a, &rule, &c).unwrap(), 0.140625, epsilon = 1e-15);
    }

    #[test]
    fn zero_gaming_never_moves() {
        let a = agent(vec![1.0, 2.0], 0.0);
        let rule = DecisionRule::new(0.0, vec![5.0, -3.0], "r").unwrap();
        assert_eq!(best_response(&a, &rule, &fig1_costs()).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn doubling_gaming_doubles_cost() {
        let rule = DecisionRule::new(0.0, vec![1.3, -0.4], "r").unwrap();
        let c1 = manipulation_cost_at_best_response(&agent(vec![0.0, 0.0], 1.7), &rule, &fig1_costs())
            .unwrap();
        let c2 = manipulation_cost_at_best_response(&agent(vec![0.0, 0.0], 3.4), &rule, &fig1_costs())
            .unwrap();
        assert_relative_eq!(c2, 2.0 * c1, max_relative = 1e-12);
    }

    #[test]
    fn predict_examples() {
        let r = DecisionRule::new(1.0, vec![0.0, 0.0], "r").unwrap();
        assert_eq!(predict(&r, &[9.0, -4.0]).unwrap(), 1.0);
        let r = DecisionRule::new(0.2, vec![3.0, 0.1, 0.1], "r").unwrap();
        assert_relative_eq!(predict(&r, &[1.0, 1.0, 1.0]).unwrap(), 3.4, epsilon = 1e-14);
        assert!(matches!(
            predict(&r, &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = agent(vec![0.0, 0.0, 0.0], 1.0);
        let rule = DecisionRule::new(0.0, vec![1.0, 1.0], "r").unwrap();
        assert!(best_response(&a, &rule, &fig1_costs()).is_err());
    }

    #[test]
    fn asymmetric_inverse_cost_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.1, 1.0]);
        assert!(CostModel::new(m).is_err());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2 + 1e-10, 1.0]);
        let c = CostModel::new(m).unwrap();
        assert_eq!(c.inv_cost()[(0, 1)], c.inv_cost()[(1, 0)]);
    }

    #[test]
    fn nonpositive_diagonal_rejected_but_negative_offdiagonal_allowed() {
        assert!(CostModel::new(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0])).is_err());
        assert!(CostModel::new(DMatrix::from_row_slice(2, 2, &[1.0, -0.3, -0.3, 1.0])).is_ok());
    }

    #[test]
    fn negative_gaming_clamped() {
        assert_eq!(agent(vec![0.0], -2.0).gaming, 0.0);
    }

    #[test]
    fn gaming_draws_with_and_without_shocks() {
        let c = fig1_costs();
        assert_eq!(c.gaming_draws(2.0).collect::<Vec<_>>(), vec![2.0]);
        let c = c.with_gaming_shocks(vec![-3.0, 0.0, 1.0]).unwrap();
        assert_eq!(c.gaming_draws(2.0).collect::<Vec<_>>(), vec![0.0, 2.0, 3.0]);
    }

    #[test]
    fn constant_rule_at_mean_gives_variance() {
        let ys = [1.0, 4.0, -2.0, 0.5];
        let agents = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| Agent::new(vec![i as f64, 1.0], 1.0 + i as f64, vec![], y).unwrap())
            .collect();
        let pop = Population::new(agents, default_feature_names(2)).unwrap();
        let mean = ys.iter().sum::<f64>() / 4.0;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / 4.0;
        let rule = DecisionRule::constant(mean, 2, "mean");
        for manip in [false, true] {
            let l = counterfactual_loss(&rule, &pop, &fig1_costs(), manip, 0.0).unwrap();
            assert_relative_eq!(l, var, epsilon = 1e-14);
        }
    }
}
