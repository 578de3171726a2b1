//! Recovering manipulation costs and gaming ability from a panel of agents
//! who faced randomized incentive schemes.
//!
//! Behavior follows x_it = x̲ᵢ + μₜ + γᵢC⁻¹β_it + noise with
//! γᵢ = exp(−ω·zᵢ) + vᵢ. The inverse cost matrix C⁻¹ and the loadings ω are
//! found by minimizing an identity-weighted sum of squared moment
//! conditions; x̲ and μ are profiled out exactly.

mod engine;
mod panel;

pub use panel::{agent_label, generate_panel, PanelDataset, PanelDgp, PanelObservation, PanelTruth};

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CostModel;
use crate::optim::{bfgs, Settings};
use engine::{moments, profile, theta_gradient, two_way_means, Cache, Prepared};

/// Serializes an infinite penalty weight as the string `"inf"`.
pub mod serde_lambda {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") => Ok(f64::INFINITY),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

fn default_phi() -> f64 {
    0.005
}

fn default_max_iterations() -> usize {
    500
}

fn default_gradient_tolerance() -> f64 {
    1e-10
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    /// Penalty on the diagonal of C⁻¹.
    #[serde(default, with = "serde_lambda")]
    pub lambda_diag: f64,
    /// Penalty on the off-diagonal of C⁻¹; infinity fixes it at zero.
    #[serde(default, with = "serde_lambda")]
    pub lambda_offdiag: f64,
    /// Shrinkage applied to the backed-out gaming shocks.
    #[serde(default = "default_phi")]
    pub phi: f64,
    /// Keep weeks in which several behaviors were incentivized at once.
    #[serde(default)]
    pub include_complex: bool,
    #[serde(default)]
    pub standard_errors: bool,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_gradient_tolerance")]
    pub gradient_tolerance: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            lambda_diag: 0.0,
            lambda_offdiag: 0.0,
            phi: default_phi(),
            include_complex: false,
            standard_errors: false,
            max_iterations: default_max_iterations(),
            gradient_tolerance: default_gradient_tolerance(),
        }
    }
}

impl GmmOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_diag >= 0.0) || !self.lambda_diag.is_finite() {
            return Err(Error::InvalidInput(format!(
                "lambda_diag must be finite and non-negative, got {}",
                self.lambda_diag
            )));
        }
        if !(self.lambda_offdiag >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "lambda_offdiag must be non-negative, got {}",
                self.lambda_offdiag
            )));
        }
        if !(self.phi >= 0.0) || !self.phi.is_finite() {
            return Err(Error::InvalidInput(format!("phi must be non-negative, got {}", self.phi)));
        }
        if self.max_iterations == 0 || !(self.gradient_tolerance > 0.0) {
            return Err(Error::InvalidInput("need max_iterations >= 1 and a positive tolerance".into()));
        }
        Ok(())
    }
}

/// Bliss points and week effects from control weeks only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeEstimates {
    pub bliss: BTreeMap<String, Vec<f64>>,
    /// Weeks without any control observation are absent.
    pub week_effects: BTreeMap<i64, Vec<f64>>,
}

fn agents_without_controls(prep: &Prepared) -> Vec<String> {
    let mut has = vec![false; prep.n_agents()];
    for o in 0..prep.n_obs() {
        if prep.is_control(o) {
            has[prep.agent[o]] = true;
        }
    }
    (0..prep.n_agents())
        .filter(|&i| !has[i])
        .map(|i| prep.agent_ids[i].clone())
        .collect()
}

fn require_controls(prep: &Prepared) -> Result<()> {
    let missing = agents_without_controls(prep);
    if missing.is_empty() {
        return Ok(());
    }
    let shown: Vec<&str> = missing.iter().take(20).map(String::as_str).collect();
    Err(Error::Identification(format!(
        "{} agent(s) have no control week: {}{}",
        missing.len(),
        shown.join(", "),
        if missing.len() > shown.len() { ", ..." } else { "" }
    )))
}

/// Two-way fixed effects x_it ≈ x̲ᵢ + μₜ fitted by least squares on control
/// weeks, with the week effects summing to zero.
pub fn estimate_types(panel: &PanelDataset, include_complex: bool) -> Result<TypeEstimates> {
    let prep = Prepared::new(panel, include_complex)?;
    require_controls(&prep)?;
    let (eta, present) = two_way_means(&prep, &prep.x, &|o| prep.is_control(o));
    Ok(unpack_eta(&prep, &eta, Some(&present)))
}

fn unpack_eta(prep: &Prepared, eta: &[f64], present: Option<&[bool]>) -> TypeEstimates {
    let k = prep.k;
    let na = prep.n_agents();
    TypeEstimates {
        bliss: (0..na)
            .map(|i| (prep.agent_ids[i].clone(), eta[i * k..(i + 1) * k].to_vec()))
            .collect(),
        week_effects: (0..prep.n_weeks())
            .filter(|&t| present.is_none_or(|p| p[t]))
            .map(|t| (prep.weeks[t], eta[(na + t) * k..(na + t + 1) * k].to_vec()))
            .collect(),
    }
}

/// Every parameter of the behavioral model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitives {
    pub bliss: BTreeMap<String, Vec<f64>>,
    pub week_effects: BTreeMap<i64, Vec<f64>>,
    pub inv_cost: Vec<Vec<f64>>,
    pub omega: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentLoss {
    /// Sum of squared moment conditions.
    pub value: f64,
    pub moments: Vec<f64>,
    /// Incentivized terms skipped because C⁻¹β had a zero in that behavior.
    pub excluded_terms: usize,
}

fn pack_eta(prep: &Prepared, params: &Primitives) -> Result<Vec<f64>> {
    let k = prep.k;
    let mut eta = Vec::with_capacity(prep.eta_len());
    for id in &prep.agent_ids {
        let b = params
            .bliss
            .get(id)
            .ok_or_else(|| Error::InvalidInput(format!("no bliss point for agent {id}")))?;
        if b.len() != k {
            return Err(Error::dim("bliss point", k, b.len()));
        }
        eta.extend_from_slice(b);
    }
    for w in &prep.weeks {
        let m = params
            .week_effects
            .get(w)
            .ok_or_else(|| Error::InvalidInput(format!("no effect for week {w}")))?;
        if m.len() != k {
            return Err(Error::dim("week effect", k, m.len()));
        }
        eta.extend_from_slice(m);
    }
    Ok(eta)
}

fn matrix(rows: &[Vec<f64>], k: usize) -> Result<DMatrix<f64>> {
    if rows.len() != k || rows.iter().any(|r| r.len() != k) {
        return Err(Error::dim("inverse cost matrix", k, rows.len()));
    }
    Ok(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
}

/// The moment loss at fully specified parameters.
pub fn gmm_loss(panel: &PanelDataset, params: &Primitives, include_complex: bool) -> Result<MomentLoss> {
    let prep = Prepared::new(panel, include_complex)?;
    let s = matrix(&params.inv_cost, prep.k)?;
    if params.omega.len() != prep.p {
        return Err(Error::dim("omega", prep.p, params.omega.len()));
    }
    let eta = pack_eta(&prep, params)?;
    let cache = Cache::new(&prep, &s, &params.omega);
    let m = moments(&prep, &cache, &eta);
    Ok(MomentLoss {
        value: m.iter().map(|v| v * v).sum(),
        moments: m,
        excluded_terms: cache.excluded,
    })
}

/// Position of each free parameter in the outer search vector: the log of
/// each diagonal entry of C⁻¹, then the upper off-diagonal entries unless
/// they are fixed at zero, then ω.
#[derive(Debug, Clone, Copy)]
struct Layout {
    k: usize,
    p: usize,
    off: bool,
}

impl Layout {
    fn len(&self) -> usize {
        self.k + if self.off { self.k * (self.k - 1) / 2 } else { 0 } + self.p
    }

    fn unpack(&self, th: &[f64]) -> (DMatrix<f64>, Vec<f64>) {
        let k = self.k;
        let mut s = DMatrix::zeros(k, k);
        for j in 0..k {
            s[(j, j)] = th[j].exp();
        }
        let mut at = k;
        if self.off {
            for j in 0..k {
                for l in j + 1..k {
                    s[(j, l)] = th[at];
                    s[(l, j)] = th[at];
                    at += 1;
                }
            }
        }
        (s, th[at..].to_vec())
    }

    fn pack(&self, s: &DMatrix<f64>, omega: &[f64]) -> Vec<f64> {
        let k = self.k;
        let mut th: Vec<f64> = (0..k).map(|j| s[(j, j)].ln()).collect();
        if self.off {
            for j in 0..k {
                for l in j + 1..k {
                    th.push(0.5 * (s[(j, l)] + s[(l, j)]));
                }
            }
        }
        th.extend_from_slice(omega);
        th
    }

    fn names(&self) -> Vec<String> {
        let mut n: Vec<String> = (1..=self.k).map(|j| format!("log_inv_cost_{j}_{j}")).collect();
        if self.off {
            for j in 1..=self.k {
                for l in j + 1..=self.k {
                    n.push(format!("inv_cost_{j}_{l}"));
                }
            }
        }
        n.extend((1..=self.p).map(|q| format!("omega_{q}")));
        n
    }
}

fn penalty_bracket(s: &DMatrix<f64>, opts: &GmmOptions) -> f64 {
    let k = s.nrows();
    let mut diag = 0.0;
    let mut off = 0.0;
    for j in 0..k {
        diag += s[(j, j)] * s[(j, j)];
        for l in 0..k {
            if l != j {
                off += s[(j, l)] * s[(j, l)];
            }
        }
    }
    // an infinite weight only ever multiplies off-diagonals pinned at zero
    let off_term = if opts.lambda_offdiag.is_finite() { opts.lambda_offdiag * off } else { 0.0 };
    opts.lambda_diag * diag + off_term
}

struct Evaluation {
    value: f64,
    loss: f64,
    penalty: f64,
    gradient: Vec<f64>,
    eta: Vec<f64>,
    cache: Cache,
}

fn evaluate(prep: &Prepared, layout: Layout, opts: &GmmOptions, th: &[f64], warm: Option<&[f64]>) -> Result<Evaluation> {
    let (s, omega) = layout.unpack(th);
    let cache = Cache::new(prep, &s, &omega);
    let prof = profile(prep, &cache, warm)?;
    let (ds, dw) = theta_gradient(prep, &cache, &prof.eta, &prof.moments);
    let e2: f64 = cache.e.iter().map(|e| e * e).sum();
    let bracket = penalty_bracket(&s, opts);
    let penalty = bracket * e2;

    let k = layout.k;
    let mut g = Vec::with_capacity(layout.len());
    for j in 0..k {
        g.push(s[(j, j)] * (ds[(j, j)] + 2.0 * opts.lambda_diag * s[(j, j)] * e2));
    }
    if layout.off {
        for j in 0..k {
            for l in j + 1..k {
                g.push(ds[(j, l)] + ds[(l, j)] + 4.0 * opts.lambda_offdiag * s[(j, l)] * e2);
            }
        }
    }
    for q in 0..layout.p {
        let de2: f64 = (0..prep.n_agents())
            .map(|i| -2.0 * prep.z[i * prep.p + q] * cache.e[i] * cache.e[i])
            .sum();
        g.push(dw[q] + bracket * de2);
    }
    Ok(Evaluation {
        value: prof.loss + penalty,
        loss: prof.loss,
        penalty,
        gradient: g,
        eta: prof.eta,
        cache,
    })
}

/// Starting values from control-week types: each C⁻¹ entry is the average
/// response of one behavior per unit of incentive on another.
fn initial_theta(prep: &Prepared, layout: Layout) -> Vec<f64> {
    let k = prep.k;
    let (eta, _) = two_way_means(prep, &prep.x, &|o| prep.is_control(o));
    let mut sum = DMatrix::<f64>::zeros(k, k);
    let mut cnt = DMatrix::<f64>::zeros(k, k);
    for o in (0..prep.n_obs()).filter(|&o| !prep.is_control(o)) {
        let b = &prep.beta[o * k..(o + 1) * k];
        let Some(l) = b.iter().position(|v| *v != 0.0) else { continue };
        if b.iter().filter(|v| **v != 0.0).count() != 1 {
            continue;
        }
        let na = prep.n_agents();
        for j in 0..k {
            let u = eta[prep.agent[o] * k + j] + eta[(na + prep.week[o]) * k + j];
            sum[(j, l)] += (prep.x[o * k + j] - u) / b[l];
            cnt[(j, l)] += 1.0;
        }
    }
    let avg = |j: usize, l: usize| if cnt[(j, l)] > 0.0 { sum[(j, l)] / cnt[(j, l)] } else { 0.0 };
    let mut s = DMatrix::zeros(k, k);
    for j in 0..k {
        let d = avg(j, j);
        s[(j, j)] = if d > 1e-3 { d } else { 1e-2_f64.max(d.abs()) };
        for l in j + 1..k {
            let v = 0.5 * (avg(j, l) + avg(l, j));
            s[(j, l)] = v;
            s[(l, j)] = v;
        }
    }
    layout.pack(&s, &vec![0.0; prep.p])
}

fn check_covariates(prep: &Prepared) -> Result<()> {
    for q in 0..prep.p {
        let first = prep.z[q];
        if (0..prep.n_agents()).all(|i| prep.z[i * prep.p + q] == first) {
            return Err(Error::Identification(format!(
                "covariate {} is constant across agents, so its loading is not identified",
                q + 1
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSe {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
}

/// Fitted cost model and everything needed to audit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitivesEstimate {
    pub feature_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub primitives: Primitives,
    /// Backed-out unobserved gaming shocks before shrinkage, by agent.
    pub raw_shocks: BTreeMap<String, f64>,
    /// max(φ·ṽᵢ, v̲) by agent.
    pub gaming_shocks: BTreeMap<String, f64>,
    /// Agents left out of the shock set for lack of incentivized weeks.
    pub agents_without_incentives: usize,
    pub shock_floor: f64,
    pub winsorized_fraction: f64,
    pub moment_loss: f64,
    pub penalty: f64,
    pub excluded_terms: usize,
    pub dropped_complex: usize,
    pub dropped_opt_out: usize,
    pub iterations: usize,
    pub standard_errors: Option<Vec<ParameterSe>>,
    pub options: GmmOptions,
}

impl PrimitivesEstimate {
    pub fn inv_cost(&self) -> DMatrix<f64> {
        let k = self.primitives.inv_cost.len();
        DMatrix::from_fn(k, k, |i, j| self.primitives.inv_cost[i][j])
    }

    /// Cost model for scoring rules, with the shrunk shocks as the set V.
    pub fn cost_model(&self) -> Result<CostModel> {
        CostModel::new(self.inv_cost())?
            .with_omega(self.primitives.omega.clone())?
            .with_gaming_shocks(self.gaming_shocks.values().copied().collect())?
            .with_feature_names(self.feature_names.clone())
    }
}

/// Average standardized residual response per agent: for each incentivized
/// behavior, the mean over its weeks of (x − x̲ − μ)/(C⁻¹β) − exp(−ω·z),
/// then the mean over behaviors. `None` for agents never incentivized.
fn raw_shocks(prep: &Prepared, cache: &Cache, eta: &[f64]) -> Vec<Option<f64>> {
    let k = prep.k;
    let na = prep.n_agents();
    let mut sum = vec![0.0; na * k];
    let mut cnt = vec![0usize; na * k];
    for &(o, j) in &cache.inc {
        let i = prep.agent[o];
        let u = eta[i * k + j] + eta[(na + prep.week[o]) * k + j];
        sum[i * k + j] += (prep.x[o * k + j] - u) / cache.d[o * k + j] - cache.e[i];
        cnt[i * k + j] += 1;
    }
    (0..na)
        .map(|i| {
            let parts: Vec<f64> = (0..k)
                .filter(|&j| cnt[i * k + j] > 0)
                .map(|j| sum[i * k + j] / cnt[i * k + j] as f64)
                .collect();
            (!parts.is_empty()).then(|| parts.iter().sum::<f64>() / parts.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShockBackout {
    pub shocks: Vec<f64>,
    /// v̲
    pub floor: f64,
    pub winsorized_fraction: f64,
}

/// Shrinks the raw shocks by φ and winsorizes from below at v̲, the smallest
/// shrunk shock that keeps every agent's gaming ability non-negative, i.e.
/// no lower than −minⱼ exp(−ω·zⱼ).
pub fn back_out_gaming(raw: &[f64], observed_gaming: &[f64], phi: f64) -> Result<ShockBackout> {
    if raw.is_empty() {
        return Err(Error::InvalidInput("no shocks to back out".into()));
    }
    let bound = -observed_gaming.iter().copied().fold(f64::INFINITY, f64::min);
    let scaled: Vec<f64> = raw.iter().map(|v| phi * v).collect();
    let floor = scaled
        .iter()
        .copied()
        .filter(|v| *v >= bound)
        .fold(f64::INFINITY, f64::min);
    let floor = if floor.is_finite() { floor } else { bound };
    let clipped = scaled.iter().filter(|v| **v < floor).count();
    Ok(ShockBackout {
        shocks: scaled.iter().map(|v| v.max(floor)).collect(),
        floor,
        winsorized_fraction: clipped as f64 / raw.len() as f64,
    })
}

/// Cost entries from a rough elicitation: α̂ₖ = γ̄βₖ / max(0.001, Δₖ), where
/// Δₖ is the behavior change observed under incentive βₖ.
pub fn elicited_costs(gamma_bar: f64, betas: &[f64], deltas: &[f64]) -> Result<Vec<f64>> {
    if betas.len() != deltas.len() {
        return Err(Error::dim("elicited behavior changes", betas.len(), deltas.len()));
    }
    crate::error::ensure_finite("elicitation inputs", betas)?;
    crate::error::ensure_finite("elicitation inputs", deltas)?;
    Ok(betas.iter().zip(deltas).map(|(b, d)| gamma_bar * b / d.max(0.001)).collect())
}

struct Fit {
    theta: Vec<f64>,
    eval: Evaluation,
    iterations: usize,
}

fn fit_prepared(prep: &Prepared, opts: &GmmOptions) -> Result<(Layout, Fit)> {
    opts.validate()?;
    require_controls(prep)?;
    check_covariates(prep)?;
    let layout = Layout {
        k: prep.k,
        p: prep.p,
        off: prep.k > 1 && opts.lambda_offdiag.is_finite(),
    };
    let th0 = initial_theta(prep, layout);
    let mut warm: Option<Vec<f64>> = None;
    let mut failure: Option<Error> = None;
    let min = bfgs(
        |th, g| match evaluate(prep, layout, opts, th, warm.as_deref()) {
            Ok(ev) => {
                g.copy_from_slice(&ev.gradient);
                warm = Some(ev.eta);
                ev.value
            }
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        &th0,
        Settings {
            max_iterations: opts.max_iterations,
            gradient_tolerance: opts.gradient_tolerance,
        },
    );
    if !min.converged {
        if let Some(e) = failure.filter(|_| !min.value.is_finite()) {
            return Err(e);
        }
        return Err(Error::NonConvergence {
            iterations: min.iterations,
            objective: min.value,
            best: min.x,
        });
    }
    let eval = evaluate(prep, layout, opts, &min.x, warm.as_deref())?;
    Ok((
        layout,
        Fit {
            theta: min.x,
            eval,
            iterations: min.iterations,
        },
    ))
}

/// Standard errors from the inverse of a finite-difference Hessian of the
/// profiled objective, with eigenvalues floored to keep it positive definite.
fn standard_errors(prep: &Prepared, layout: Layout, opts: &GmmOptions, fit: &Fit) -> Result<Vec<ParameterSe>> {
    let n = layout.len();
    let mut h = DMatrix::zeros(n, n);
    for b in 0..n {
        let step = 1e-5 * (1.0 + fit.theta[b].abs());
        let mut up = fit.theta.clone();
        up[b] += step;
        let mut dn = fit.theta.clone();
        dn[b] -= step;
        let gu = evaluate(prep, layout, opts, &up, Some(&fit.eval.eta))?.gradient;
        let gd = evaluate(prep, layout, opts, &dn, Some(&fit.eval.eta))?.gradient;
        for a in 0..n {
            h[(a, b)] = (gu[a] - gd[a]) / (2.0 * step);
        }
    }
    let h = (&h + h.transpose()) * 0.5;
    let eig = h.symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-8 * top).max(1e-300);
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v.max(floor));
    let cov = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    Ok(layout
        .names()
        .into_iter()
        .enumerate()
        .map(|(a, name)| ParameterSe {
            name,
            estimate: fit.theta[a],
            se: cov[(a, a)].max(0.0).sqrt(),
        })
        .collect())
}

/// Estimates C⁻¹, ω, bliss points, week effects and the gaming shocks.
///
/// On non-convergence the error carries the best iterate as
/// (ln c₁₁ … ln c_KK, upper off-diagonal entries unless fixed at zero, ω).
pub fn fit_primitives(panel: &PanelDataset, opts: &GmmOptions) -> Result<PrimitivesEstimate> {
    let prep = Prepared::new(panel, opts.include_complex)?;
    let (layout, fit) = fit_prepared(&prep, opts)?;
    let (s, omega) = layout.unpack(&fit.theta);
    let types = unpack_eta(&prep, &fit.eval.eta, None);
    let raw: Vec<(String, f64)> = prep
        .agent_ids
        .iter()
        .zip(raw_shocks(&prep, &fit.eval.cache, &fit.eval.eta))
        .filter_map(|(id, v)| v.map(|v| (id.clone(), v)))
        .collect();
    let missing = prep.n_agents() - raw.len();
    if missing > 0 {
        log::warn!("{missing} agent(s) had no incentivized week and are left out of the gaming shocks");
    }
    let values: Vec<f64> = raw.iter().map(|(_, v)| *v).collect();
    let backout = back_out_gaming(&values, &fit.eval.cache.e, opts.phi)?;
    let se = if opts.standard_errors {
        Some(standard_errors(&prep, layout, opts, &fit)?)
    } else {
        None
    };
    let k = prep.k;
    Ok(PrimitivesEstimate {
        feature_names: panel.feature_names.clone(),
        covariate_names: panel.covariate_names.clone(),
        primitives: Primitives {
            bliss: types.bliss,
            week_effects: types.week_effects,
            inv_cost: (0..k).map(|i| (0..k).map(|j| s[(i, j)]).collect()).collect(),
            omega,
        },
        gaming_shocks: raw.iter().map(|(id, _)| id.clone()).zip(backout.shocks).collect(),
        raw_shocks: raw.into_iter().collect(),
        agents_without_incentives: missing,
        shock_floor: backout.floor,
        winsorized_fraction: backout.winsorized_fraction,
        moment_loss: fit.eval.loss,
        penalty: fit.eval.penalty,
        excluded_terms: fit.eval.cache.excluded,
        dropped_complex: prep.dropped_complex,
        dropped_opt_out: prep.dropped_opt_out,
        iterations: fit.iterations,
        standard_errors: se,
        options: *opts,
    })
}

pub fn default_lambda_grid() -> Vec<f64> {
    vec![0.0, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3]
}

pub fn default_offdiag_grid() -> Vec<f64> {
    let mut g = default_lambda_grid();
    g.push(f64::INFINITY);
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCvPoint {
    pub lambda_diag: f64,
    #[serde(with = "serde_lambda")]
    pub lambda_offdiag: f64,
    /// Mean squared prediction error on held-out incentivized weeks;
    /// infinite when a fold failed to fit.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCv {
    pub lambda_diag: f64,
    #[serde(with = "serde_lambda")]
    pub lambda_offdiag: f64,
    pub points: Vec<CostCvPoint>,
}

/// A converged fit, or the best iterate of one that did not converge.
/// Strong penalties can push a diagonal entry of C⁻¹ to the boundary at
/// zero, where the search never settles but its best point still predicts.
fn fit_or_best(prep: &Prepared, opts: &GmmOptions) -> Result<(Layout, Fit)> {
    match fit_prepared(prep, opts) {
        Err(Error::NonConvergence { iterations, best, .. }) if !best.is_empty() => {
            let layout = Layout {
                k: prep.k,
                p: prep.p,
                off: prep.k > 1 && opts.lambda_offdiag.is_finite(),
            };
            let eval = evaluate(prep, layout, opts, &best, None)?;
            Ok((
                layout,
                Fit {
                    theta: best,
                    eval,
                    iterations,
                },
            ))
        }
        other => other,
    }
}

/// Held-out error of a fit: bliss points from each held-out agent's control
/// weeks, then behavior predicted on their incentivized weeks.
fn holdout_error(test: &Prepared, train: &Prepared, layout: Layout, fit: &Fit) -> Option<(f64, usize)> {
    let k = test.k;
    let (s, omega) = layout.unpack(&fit.theta);
    let na_train = train.n_agents();
    let week_pos: BTreeMap<i64, usize> = train.weeks.iter().enumerate().map(|(t, w)| (*w, t)).collect();
    let mu = |w: i64, j: usize| week_pos.get(&w).map(|&t| fit.eval.eta[(na_train + t) * k + j]);
    let mut bliss = vec![0.0; test.n_agents() * k];
    let mut cnt = vec![0usize; test.n_agents()];
    for o in (0..test.n_obs()).filter(|&o| test.is_control(o)) {
        let w = test.weeks[test.week[o]];
        if mu(w, 0).is_none() {
            continue;
        }
        let i = test.agent[o];
        for j in 0..k {
            bliss[i * k + j] += test.x[o * k + j] - mu(w, j).unwrap();
        }
        cnt[i] += 1;
    }
    let mut err = 0.0;
    let mut n = 0usize;
    for o in (0..test.n_obs()).filter(|&o| !test.is_control(o)) {
        let i = test.agent[o];
        let w = test.weeks[test.week[o]];
        if cnt[i] == 0 || mu(w, 0).is_none() {
            continue;
        }
        let e = test.observed_gaming(&omega, i);
        let b = &test.beta[o * k..(o + 1) * k];
        for j in 0..k {
            let shift: f64 = (0..k).map(|l| s[(j, l)] * b[l]).sum();
            let pred = bliss[i * k + j] / cnt[i] as f64 + mu(w, j).unwrap() + e * shift;
            err += (test.x[o * k + j] - pred).powi(2);
        }
        n += 1;
    }
    (n > 0).then_some((err, n))
}

/// Chooses (λ_diag, λ_offdiag) by K-fold cross-validation over agents.
/// Ties, within a relative 1e-9, go to the earliest grid point, so the
/// smallest penalties win when nothing separates them.
pub fn cv_lambda_costs(
    panel: &PanelDataset,
    base: &GmmOptions,
    folds: usize,
    seed: u64,
    diag_grid: &[f64],
    offdiag_grid: &[f64],
) -> Result<CostCv> {
    base.validate()?;
    if diag_grid.is_empty() || offdiag_grid.is_empty() {
        return Err(Error::InvalidInput("penalty grids must be non-empty".into()));
    }
    let prep = Prepared::new(panel, base.include_complex)?;
    let na = prep.n_agents();
    if folds < 2 || folds > na {
        return Err(Error::InvalidInput(format!("need 2 <= folds <= {na}, got {folds}")));
    }
    let mut ids = prep.agent_ids.clone();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_sets: Vec<BTreeSet<String>> = (0..folds)
        .map(|f| ids.iter().skip(f).step_by(folds).cloned().collect())
        .collect();
    let splits: Vec<(Prepared, Prepared)> = fold_sets
        .iter()
        .map(|held| {
            let train_ids: BTreeSet<String> = ids.iter().filter(|a| !held.contains(*a)).cloned().collect();
            Ok((
                Prepared::new(&panel.restrict_agents(&train_ids), base.include_complex)?,
                Prepared::new(&panel.restrict_agents(held), base.include_complex)?,
            ))
        })
        .collect::<Result<_>>()?;
    let grid: Vec<(f64, f64)> = diag_grid
        .iter()
        .flat_map(|&d| offdiag_grid.iter().map(move |&o| (d, o)))
        .collect();
    let points: Vec<CostCvPoint> = grid
        .par_iter()
        .map(|&(ld, lo)| {
            let opts = GmmOptions {
                lambda_diag: ld,
                lambda_offdiag: lo,
                standard_errors: false,
                ..*base
            };
            let mut err = 0.0;
            let mut n = 0usize;
            let mut failed = false;
            for (train, test) in &splits {
                match fit_or_best(train, &opts) {
                    Ok((layout, fit)) => {
                        if let Some((e, m)) = holdout_error(test, train, layout, &fit) {
                            err += e;
                            n += m;
                        }
                    }
                    Err(e) if e.is_numerical() => {
                        failed = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(CostCvPoint {
                lambda_diag: ld,
                lambda_offdiag: lo,
                error: if failed || n == 0 { f64::INFINITY } else { err / n as f64 },
            })
        })
        .collect::<Result<_>>()?;
    let mut best: Option<&CostCvPoint> = None;
    for p in &points {
        if !p.error.is_finite() {
            continue;
        }
        match best {
            Some(b) if p.error >= b.error - 1e-9 * b.error.abs() => {}
            _ => best = Some(p),
        }
    }
    let best = best.unwrap_or_else(|| {
        log::warn!("no penalty on the grid could be scored; returning the first grid point");
        &points[0]
    });
    Ok(CostCv {
        lambda_diag: best.lambda_diag,
        lambda_offdiag: best.lambda_offdiag,
        points: points.clone(),
    })
}

#[cfg(test)]
mod tests;
