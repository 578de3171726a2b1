//! Moment conditions of the cost model and the exact profile over the
//! nuisance parameters (bliss points and week effects).
//!
//! Observations are stored flat in canonical (agent id, week) order. The
//! nuisance vector η holds x̲ (agent-major, N·K entries) followed by μ (T·K).
//! Every moment depends on η only through uₒ = x̲ᵢ + μₜ and is affine in it,
//! so for fixed (C⁻¹, ω) the loss is a quadratic in η.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::panel::PanelDataset;
use crate::error::{Error, Result};

pub(crate) struct Prepared {
    pub k: usize,
    pub p: usize,
    pub agent_ids: Vec<String>,
    pub weeks: Vec<i64>,
    pub agent: Vec<usize>,
    pub week: Vec<usize>,
    pub x: Vec<f64>,
    pub beta: Vec<f64>,
    pub z: Vec<f64>,
    pub per_agent: Vec<usize>,
    pub per_week: Vec<usize>,
    pub dropped_opt_out: usize,
    pub dropped_complex: usize,
}

impl Prepared {
    pub fn new(panel: &PanelDataset, include_complex: bool) -> Result<Self> {
        panel.validate()?;
        let k = panel.dim();
        let p = panel.covariate_dim();
        let mut dropped_opt_out = 0;
        let mut dropped_complex = 0;
        let mut rows: Vec<_> = panel
            .observations
            .iter()
            .filter(|o| {
                if !o.opted_in {
                    dropped_opt_out += 1;
                    false
                } else if !include_complex && o.is_complex() {
                    dropped_complex += 1;
                    false
                } else {
                    true
                }
            })
            .collect();
        if rows.is_empty() {
            return Err(Error::InvalidInput("panel has no usable observations".into()));
        }
        rows.sort_by(|a, b| (&a.agent_id, a.week).cmp(&(&b.agent_id, b.week)));
        let agent_index: BTreeMap<&str, usize> = {
            let mut ids: Vec<&str> = rows.iter().map(|o| o.agent_id.as_str()).collect();
            ids.dedup();
            ids.into_iter().enumerate().map(|(i, a)| (a, i)).collect()
        };
        let week_index: BTreeMap<i64, usize> = {
            let mut w: Vec<i64> = rows.iter().map(|o| o.week).collect();
            w.sort_unstable();
            w.dedup();
            w.into_iter().enumerate().map(|(i, w)| (w, i)).collect()
        };
        let n = agent_index.len();
        let agent_ids: Vec<String> = agent_index.keys().map(|s| s.to_string()).collect();
        let mut z = Vec::with_capacity(n * p);
        for id in &agent_ids {
            if p > 0 {
                z.extend_from_slice(&panel.covariates[id]);
            }
        }
        let mut prep = Prepared {
            k,
            p,
            agent_ids,
            weeks: week_index.keys().copied().collect(),
            agent: Vec::with_capacity(rows.len()),
            week: Vec::with_capacity(rows.len()),
            x: Vec::with_capacity(rows.len() * k),
            beta: Vec::with_capacity(rows.len() * k),
            z,
            per_agent: vec![0; n],
            per_week: vec![0; week_index.len()],
            dropped_opt_out,
            dropped_complex,
        };
        for o in rows {
            let i = agent_index[o.agent_id.as_str()];
            let t = week_index[&o.week];
            prep.agent.push(i);
            prep.week.push(t);
            prep.x.extend_from_slice(&o.x);
            prep.beta.extend_from_slice(&o.beta);
            prep.per_agent[i] += 1;
            prep.per_week[t] += 1;
        }
        Ok(prep)
    }

    pub fn n_agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn n_weeks(&self) -> usize {
        self.weeks.len()
    }

    pub fn n_obs(&self) -> usize {
        self.agent.len()
    }

    pub fn eta_len(&self) -> usize {
        (self.n_agents() + self.n_weeks()) * self.k
    }

    pub fn is_control(&self, o: usize) -> bool {
        self.beta[o * self.k..(o + 1) * self.k].iter().all(|b| *b == 0.0)
    }

    pub fn observed_gaming(&self, omega: &[f64], i: usize) -> f64 {
        let z = &self.z[i * self.p..(i + 1) * self.p];
        (-omega.iter().zip(z).map(|(w, z)| w * z).sum::<f64>()).exp()
    }

    fn g2(&self) -> usize {
        self.k * self.k
    }

    fn g3(&self) -> usize {
        self.g2() + self.n_weeks() * self.k
    }

    fn g4(&self) -> usize {
        self.g3() + self.n_agents() * self.k
    }

    pub fn n_moments(&self) -> usize {
        self.g4() + 1 + self.p
    }

    fn u(&self, eta: &[f64], o: usize, j: usize) -> f64 {
        let k = self.k;
        eta[self.agent[o] * k + j] + eta[(self.n_agents() + self.week[o]) * k + j]
    }
}

/// Quantities that depend on (C⁻¹, ω) only.
pub(crate) struct Cache {
    pub e: Vec<f64>,
    /// e_i · C⁻¹βₒ
    pub off: Vec<f64>,
    /// C⁻¹βₒ
    pub d: Vec<f64>,
    /// Incentivized (observation, behavior) pairs with a usable divisor.
    pub inc: Vec<(usize, usize)>,
    /// Incentivized pairs dropped because the divisor was exactly zero.
    pub excluded: usize,
}

impl Cache {
    pub fn new(prep: &Prepared, s: &DMatrix<f64>, omega: &[f64]) -> Self {
        let k = prep.k;
        let e: Vec<f64> = (0..prep.n_agents()).map(|i| prep.observed_gaming(omega, i)).collect();
        let mut off = vec![0.0; prep.n_obs() * k];
        let mut d = vec![0.0; prep.n_obs() * k];
        let mut inc = Vec::new();
        let mut excluded = 0;
        for o in 0..prep.n_obs() {
            let b = &prep.beta[o * k..(o + 1) * k];
            for j in 0..k {
                let dj: f64 = (0..k).map(|l| s[(j, l)] * b[l]).sum();
                d[o * k + j] = dj;
                off[o * k + j] = e[prep.agent[o]] * dj;
                if b[j] != 0.0 {
                    if dj == 0.0 {
                        excluded += 1;
                    } else {
                        inc.push((o, j));
                    }
                }
            }
        }
        Self { e, off, d, inc, excluded }
    }
}

/// All moment conditions at η.
pub(crate) fn moments(prep: &Prepared, c: &Cache, eta: &[f64]) -> Vec<f64> {
    let k = prep.k;
    let mut m = vec![0.0; prep.n_moments()];
    let (g2, g3, g4) = (prep.g2(), prep.g3(), prep.g4());
    for o in 0..prep.n_obs() {
        let (i, t) = (prep.agent[o], prep.week[o]);
        for j in 0..k {
            let rho = prep.x[o * k + j] - c.off[o * k + j] - prep.u(eta, o, j);
            for l in 0..k {
                m[j * k + l] += prep.beta[o * k + l] * rho;
            }
            m[g2 + t * k + j] += rho;
            m[g3 + i * k + j] += rho;
        }
    }
    for &(o, j) in &c.inc {
        let i = prep.agent[o];
        let tau = (prep.x[o * k + j] - prep.u(eta, o, j)) / c.d[o * k + j] - c.e[i];
        m[g4] += tau;
        for q in 0..prep.p {
            m[g4 + 1 + q] += prep.z[i * prep.p + q] * tau;
        }
    }
    normalize(prep, c, &mut m);
    m
}

fn normalize(prep: &Prepared, c: &Cache, m: &mut [f64]) {
    let k = prep.k;
    let n = prep.n_obs() as f64;
    m[..k * k].iter_mut().for_each(|v| *v /= n);
    for t in 0..prep.n_weeks() {
        let nt = prep.per_week[t] as f64;
        m[prep.g2() + t * k..prep.g2() + (t + 1) * k].iter_mut().for_each(|v| *v /= nt);
    }
    for i in 0..prep.n_agents() {
        let ni = prep.per_agent[i] as f64;
        m[prep.g3() + i * k..prep.g3() + (i + 1) * k].iter_mut().for_each(|v| *v /= ni);
    }
    let mi = c.inc.len().max(1) as f64;
    m[prep.g4()..].iter_mut().for_each(|v| *v /= mi);
}

/// The linear part A·η of the moments.
fn apply(prep: &Prepared, c: &Cache, eta: &[f64]) -> Vec<f64> {
    let k = prep.k;
    let mut m = vec![0.0; prep.n_moments()];
    let (g2, g3, g4) = (prep.g2(), prep.g3(), prep.g4());
    for o in 0..prep.n_obs() {
        let (i, t) = (prep.agent[o], prep.week[o]);
        for j in 0..k {
            let u = prep.u(eta, o, j);
            for l in 0..k {
                m[j * k + l] -= prep.beta[o * k + l] * u;
            }
            m[g2 + t * k + j] -= u;
            m[g3 + i * k + j] -= u;
        }
    }
    for &(o, j) in &c.inc {
        let i = prep.agent[o];
        let v = prep.u(eta, o, j) / c.d[o * k + j];
        m[g4] -= v;
        for q in 0..prep.p {
            m[g4 + 1 + q] -= prep.z[i * prep.p + q] * v;
        }
    }
    normalize(prep, c, &mut m);
    m
}

/// Per-observation sensitivity of Σ wₘ·mₘ to ρₒ, restricted to the first
/// three moment families.
fn rho_weights(prep: &Prepared, w: &[f64], o: usize, out: &mut [f64]) {
    let k = prep.k;
    let n = prep.n_obs() as f64;
    let (i, t) = (prep.agent[o], prep.week[o]);
    let nt = prep.per_week[t] as f64;
    let ni = prep.per_agent[i] as f64;
    for j in 0..k {
        let mut v = 0.0;
        for l in 0..k {
            v += prep.beta[o * k + l] * w[j * k + l];
        }
        out[j] = v / n + w[prep.g2() + t * k + j] / nt + w[prep.g3() + i * k + j] / ni;
    }
}

/// Weight on τ for agent i from the last two families.
fn tau_weight(prep: &Prepared, c: &Cache, w: &[f64], i: usize) -> f64 {
    let g4 = prep.g4();
    let mut v = w[g4];
    for q in 0..prep.p {
        v += prep.z[i * prep.p + q] * w[g4 + 1 + q];
    }
    v / c.inc.len().max(1) as f64
}

/// Aᵀw.
fn adjoint(prep: &Prepared, c: &Cache, w: &[f64]) -> Vec<f64> {
    let k = prep.k;
    let na = prep.n_agents();
    let mut g = vec![0.0; prep.eta_len()];
    let mut v = vec![0.0; k];
    for o in 0..prep.n_obs() {
        rho_weights(prep, w, o, &mut v);
        let (i, t) = (prep.agent[o], prep.week[o]);
        for j in 0..k {
            g[i * k + j] -= v[j];
            g[(na + t) * k + j] -= v[j];
        }
    }
    let wt: Vec<f64> = (0..na).map(|i| tau_weight(prep, c, w, i)).collect();
    for &(o, j) in &c.inc {
        let (i, t) = (prep.agent[o], prep.week[o]);
        let v = wt[i] / c.d[o * k + j];
        g[i * k + j] -= v;
        g[(na + t) * k + j] -= v;
    }
    g
}

const GAUGE_WEIGHT: f64 = 1.0;

/// (AᵀA + G)η, where G penalizes Σₜμₜ to pin down the level shared by
/// x̲ and μ.
fn normal_op(prep: &Prepared, c: &Cache, eta: &[f64]) -> Vec<f64> {
    let mut out = adjoint(prep, c, &apply(prep, c, eta));
    let k = prep.k;
    let na = prep.n_agents();
    for j in 0..k {
        let s: f64 = (0..prep.n_weeks()).map(|t| eta[(na + t) * k + j]).sum();
        for t in 0..prep.n_weeks() {
            out[(na + t) * k + j] += GAUGE_WEIGHT * s;
        }
    }
    out
}

fn preconditioner(prep: &Prepared) -> Vec<f64> {
    let k = prep.k;
    let na = prep.n_agents();
    let mut diag = vec![1.0; prep.eta_len()];
    for o in 0..prep.n_obs() {
        let (i, t) = (prep.agent[o], prep.week[o]);
        let nt = prep.per_week[t] as f64;
        let ni = prep.per_agent[i] as f64;
        for j in 0..k {
            diag[i * k + j] += 1.0 / (nt * nt);
            diag[(na + t) * k + j] += 1.0 / (ni * ni);
        }
    }
    for t in 0..prep.n_weeks() {
        for j in 0..k {
            diag[(na + t) * k + j] += GAUGE_WEIGHT;
        }
    }
    diag
}

/// Alternating two-way means of `resid` over the observations in `mask`:
/// the least-squares fit resid ≈ x̲ᵢ + μₜ with Σₜμₜ = 0 over the weeks that
/// appear. Returns η and a flag per week telling whether it appeared.
pub(crate) fn two_way_means(prep: &Prepared, resid: &[f64], mask: &dyn Fn(usize) -> bool) -> (Vec<f64>, Vec<bool>) {
    let k = prep.k;
    let na = prep.n_agents();
    let nw = prep.n_weeks();
    let mut eta = vec![0.0; prep.eta_len()];
    let mut na_cnt = vec![0usize; na];
    let mut nw_cnt = vec![0usize; nw];
    for o in (0..prep.n_obs()).filter(|&o| mask(o)) {
        na_cnt[prep.agent[o]] += 1;
        nw_cnt[prep.week[o]] += 1;
    }
    let scale = resid.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    for _sweep in 0..10_000 {
        let mut change = 0.0f64;
        let mut acc = vec![0.0; na * k];
        for o in (0..prep.n_obs()).filter(|&o| mask(o)) {
            for j in 0..k {
                acc[prep.agent[o] * k + j] += resid[o * k + j] - eta[(na + prep.week[o]) * k + j];
            }
        }
        for i in 0..na {
            if na_cnt[i] > 0 {
                for j in 0..k {
                    let v = acc[i * k + j] / na_cnt[i] as f64;
                    change = change.max((v - eta[i * k + j]).abs());
                    eta[i * k + j] = v;
                }
            }
        }
        let mut acc = vec![0.0; nw * k];
        for o in (0..prep.n_obs()).filter(|&o| mask(o)) {
            for j in 0..k {
                acc[prep.week[o] * k + j] += resid[o * k + j] - eta[prep.agent[o] * k + j];
            }
        }
        for t in 0..nw {
            if nw_cnt[t] > 0 {
                for j in 0..k {
                    let v = acc[t * k + j] / nw_cnt[t] as f64;
                    change = change.max((v - eta[(na + t) * k + j]).abs());
                    eta[(na + t) * k + j] = v;
                }
            }
        }
        if change <= 1e-14 * scale {
            break;
        }
    }
    let present: Vec<bool> = nw_cnt.iter().map(|c| *c > 0).collect();
    let m = present.iter().filter(|p| **p).count().max(1) as f64;
    for j in 0..k {
        let mean: f64 = (0..nw).filter(|&t| present[t]).map(|t| eta[(na + t) * k + j]).sum::<f64>() / m;
        for t in (0..nw).filter(|&t| present[t]) {
            eta[(na + t) * k + j] -= mean;
        }
        for i in (0..na).filter(|&i| na_cnt[i] > 0) {
            eta[i * k + j] += mean;
        }
    }
    (eta, present)
}

pub(crate) struct Profile {
    pub eta: Vec<f64>,
    pub moments: Vec<f64>,
    pub loss: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes the moment loss over η for fixed (C⁻¹, ω) by preconditioned
/// conjugate gradients on the normal equations.
pub(crate) fn profile(prep: &Prepared, c: &Cache, warm: Option<&[f64]>) -> Result<Profile> {
    let zero = vec![0.0; prep.eta_len()];
    let m0 = moments(prep, c, &zero);
    let mut b = adjoint(prep, c, &m0);
    b.iter_mut().for_each(|v| *v = -*v);
    let b_norm = dot(&b, &b).sqrt();
    let mut eta = match warm {
        Some(w) => w.to_vec(),
        None => {
            let resid: Vec<f64> = prep.x.iter().zip(&c.off).map(|(x, o)| x - o).collect();
            two_way_means(prep, &resid, &|_| true).0
        }
    };
    let pre = preconditioner(prep);
    let h = normal_op(prep, c, &eta);
    let mut r: Vec<f64> = b.iter().zip(&h).map(|(b, h)| b - h).collect();
    let mut zv: Vec<f64> = r.iter().zip(&pre).map(|(r, p)| r / p).collect();
    let mut dir = zv.clone();
    let mut rz = dot(&r, &zv);
    let tol = 1e-13 * b_norm.max(f64::MIN_POSITIVE);
    let max_iter = 20 * prep.eta_len().max(50);
    let mut iterations = 0;
    while dot(&r, &r).sqrt() > tol {
        if iterations >= max_iter {
            return Err(Error::NonConvergence {
                iterations,
                objective: f64::NAN,
                best: Vec::new(),
            });
        }
        let hd = normal_op(prep, c, &dir);
        let dhd = dot(&dir, &hd);
        if !(dhd > 0.0) {
            break;
        }
        let a = rz / dhd;
        eta.iter_mut().zip(&dir).for_each(|(e, d)| *e += a * d);
        r.iter_mut().zip(&hd).for_each(|(r, h)| *r -= a * h);
        zv = r.iter().zip(&pre).map(|(r, p)| r / p).collect();
        let rz_new = dot(&r, &zv);
        let beta = rz_new / rz;
        rz = rz_new;
        dir.iter_mut().zip(&zv).for_each(|(d, z)| *d = z + beta * *d);
        iterations += 1;
    }
    let m = moments(prep, c, &eta);
    let loss = dot(&m, &m);
    if !loss.is_finite() {
        return Err(Error::NonFinite("cost-model moment loss".into()));
    }
    Ok(Profile {
        eta,
        moments: m,
        loss,
    })
}

/// ∂(Σₘ mₘ²)/∂C⁻¹ (entries treated as free) and ∂/∂ω at fixed η.
pub(crate) fn theta_gradient(
    prep: &Prepared,
    c: &Cache,
    eta: &[f64],
    m: &[f64],
) -> (DMatrix<f64>, Vec<f64>) {
    let k = prep.k;
    let p = prep.p;
    let w: Vec<f64> = m.iter().map(|v| 2.0 * v).collect();
    let mut ds = DMatrix::zeros(k, k);
    let mut dw = vec![0.0; p];
    let mut v = vec![0.0; k];
    for o in 0..prep.n_obs() {
        rho_weights(prep, &w, o, &mut v);
        let i = prep.agent[o];
        let e = c.e[i];
        for j in 0..k {
            for l in 0..k {
                ds[(j, l)] -= v[j] * e * prep.beta[o * k + l];
            }
        }
        if p > 0 {
            let s: f64 = (0..k).map(|j| v[j] * c.d[o * k + j]).sum::<f64>() * e;
            for q in 0..p {
                dw[q] += prep.z[i * p + q] * s;
            }
        }
    }
    for &(o, j) in &c.inc {
        let i = prep.agent[o];
        let wt = tau_weight(prep, c, &w, i);
        let d = c.d[o * k + j];
        let num = prep.x[o * k + j] - prep.u(eta, o, j);
        for l in 0..k {
            ds[(j, l)] -= wt * num / (d * d) * prep.beta[o * k + l];
        }
        for q in 0..p {
            dw[q] += wt * prep.z[i * p + q] * c.e[i];
        }
    }
    (ds, dw)
}
