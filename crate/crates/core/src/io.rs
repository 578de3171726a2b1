//! CSV and JSON formats for populations, cost models, rules and panels.
//!
//! Floats are written in the shortest form that parses back to the same
//! bits, so every file round-trips exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{PanelDataset, PanelObservation, PrimitivesEstimate};
use crate::model::{default_feature_names, Agent, CostModel, DecisionRule, Population};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("{what}: cannot read {s:?} as a number")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

fn write_err(e: impl std::fmt::Display) -> Error {
    Error::Parse(format!("write failed: {e}"))
}

pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

fn record_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().from_writer(w)
}

/// Writes `agent_id,y,z_1..z_P,<features>`, plus a trailing `gamma` column
/// holding each agent's gaming ability when `include_gamma` is set.
pub fn write_population_csv<W: Write>(pop: &Population, w: W, include_gamma: bool) -> Result<()> {
    let p = pop.observable_dim();
    let mut out = record_writer(w);
    let mut header = vec!["agent_id".to_string(), "y".to_string()];
    header.extend((1..=p).map(|j| format!("z_{j}")));
    header.extend(pop.feature_names().iter().cloned());
    if include_gamma {
        header.push("gamma".into());
    }
    out.write_record(&header).map_err(csv_err)?;
    for (i, a) in pop.agents().iter().enumerate() {
        let mut rec = vec![i.to_string(), fmt_f64(a.outcome)];
        rec.extend(a.observables.iter().map(|v| fmt_f64(*v)));
        rec.extend(a.bliss.iter().map(|v| fmt_f64(*v)));
        if include_gamma {
            rec.push(fmt_f64(a.gaming));
        }
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush().map_err(write_err)
}

/// Reads a population CSV. Columns named `z_*` are observables, an optional
/// `gamma` column sets gaming ability (default 1), and every other column
/// after `agent_id` and `y` is a behavior. Agent ids are not kept.
pub fn read_population_csv<R: Read>(r: R) -> Result<Population> {
    read_population_csv_checked(r).map(|(p, _)| p)
}

/// Like [`read_population_csv`], also reporting whether a `gamma` column was present.
pub fn read_population_csv_checked<R: Read>(r: R) -> Result<(Population, bool)> {
    let mut rd = reader(r);
    let header = rd.headers().map_err(csv_err)?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let y = col("y").ok_or_else(|| Error::Parse("population CSV needs a `y` column".into()))?;
    let id = col("agent_id");
    let gamma = col("gamma");
    let z: Vec<usize> = (0..header.len()).filter(|&c| header[c].starts_with("z_")).collect();
    let features: Vec<usize> = (0..header.len())
        .filter(|&c| Some(c) != id && c != y && Some(c) != gamma && !z.contains(&c))
        .collect();
    let names: Vec<String> = features.iter().map(|&c| header[c].to_string()).collect();
    let mut agents = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let what = format!("population row {}", line + 1);
        let get = |c: usize| parse_f64(rec.get(c).unwrap_or(""), &what);
        agents.push(Agent::new(
            features.iter().map(|&c| get(c)).collect::<Result<_>>()?,
            gamma.map(get).transpose()?.unwrap_or(1.0),
            z.iter().map(|&c| get(c)).collect::<Result<_>>()?,
            get(y)?,
        )?);
    }
    Ok((Population::new(agents, names)?, gamma.is_some()))
}

/// On-disk form of a [`CostModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModelFile {
    pub inv_cost: Vec<Vec<f64>>,
    #[serde(default)]
    pub omega: Vec<f64>,
    #[serde(default)]
    pub gaming_shocks: Vec<f64>,
    #[serde(default)]
    pub feature_names: Vec<String>,
}

impl CostModelFile {
    pub fn from_model(c: &CostModel) -> Self {
        let m = c.inv_cost();
        Self {
            inv_cost: (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect(),
            omega: c.omega().to_vec(),
            gaming_shocks: c.gaming_shocks().to_vec(),
            feature_names: c.feature_names().to_vec(),
        }
    }

    pub fn to_model(&self) -> Result<CostModel> {
        let k = self.inv_cost.len();
        if self.inv_cost.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidInput("inv_cost must be a square matrix".into()));
        }
        let names = if self.feature_names.is_empty() {
            default_feature_names(k)
        } else {
            self.feature_names.clone()
        };
        CostModel::new(DMatrix::from_fn(k, k, |i, j| self.inv_cost[i][j]))?
            .with_omega(self.omega.clone())?
            .with_gaming_shocks(self.gaming_shocks.clone())?
            .with_feature_names(names)
    }
}

pub fn cost_model_to_json(c: &CostModel) -> Result<String> {
    serde_json::to_string_pretty(&CostModelFile::from_model(c)).map_err(write_err)
}

pub fn cost_model_from_json(s: &str) -> Result<CostModel> {
    let file: CostModelFile = serde_json::from_str(s).map_err(|e| Error::Parse(format!("cost model JSON: {e}")))?;
    file.to_model()
}

/// `name,beta0,beta_1..beta_K`, one rule per line.
pub fn write_rules_csv<W: Write>(rules: &[DecisionRule], w: W) -> Result<()> {
    let k = rules.first().map_or(0, DecisionRule::dim);
    if rules.iter().any(|r| r.dim() != k) {
        return Err(Error::InvalidInput("rules in one file must share a dimension".into()));
    }
    let mut out = record_writer(w);
    let mut header = vec!["name".to_string(), "beta0".to_string()];
    header.extend((1..=k).map(|j| format!("beta_{j}")));
    out.write_record(&header).map_err(csv_err)?;
    for r in rules {
        let mut rec = vec![r.label.clone()];
        rec.extend(r.to_vec().into_iter().map(fmt_f64));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush().map_err(write_err)
}

pub fn read_rules_csv<R: Read>(r: R) -> Result<Vec<DecisionRule>> {
    let mut rd = reader(r);
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.get(0) != Some("name") || header.get(1) != Some("beta0") {
        return Err(Error::Parse("rule CSV must start with `name,beta0`".into()));
    }
    let mut rules = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let what = format!("rule row {}", line + 1);
        let vals: Vec<f64> = rec.iter().skip(1).map(|v| parse_f64(v, &what)).collect::<Result<_>>()?;
        rules.push(DecisionRule::new(vals[0], vals[1..].to_vec(), rec.get(0).unwrap_or(""))?);
    }
    Ok(rules)
}

/// Long-format panel: `agent_id,week,opted_in,beta_1..beta_K,x_1..x_K`.
pub fn write_panel_csv<W: Write>(panel: &PanelDataset, w: W) -> Result<()> {
    let k = panel.dim();
    let mut out = record_writer(w);
    let mut header = vec!["agent_id".to_string(), "week".into(), "opted_in".into()];
    header.extend((1..=k).map(|j| format!("beta_{j}")));
    header.extend((1..=k).map(|j| format!("x_{j}")));
    out.write_record(&header).map_err(csv_err)?;
    for o in &panel.observations {
        let mut rec = vec![o.agent_id.clone(), o.week.to_string(), u8::from(o.opted_in).to_string()];
        rec.extend(o.beta.iter().chain(&o.x).map(|v| fmt_f64(*v)));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush().map_err(write_err)
}

fn parse_bool(s: &str, what: &str) -> Result<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        _ => Err(Error::Parse(format!("{what}: cannot read {s:?} as opted_in"))),
    }
}

pub fn read_panel_observations<R: Read>(r: R) -> Result<(usize, Vec<PanelObservation>)> {
    let mut rd = reader(r);
    let header = rd.headers().map_err(csv_err)?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[..3] != ["agent_id", "week", "opted_in"] {
        return Err(Error::Parse("panel CSV must start with `agent_id,week,opted_in`".into()));
    }
    let k = cols.iter().filter(|c| c.starts_with("beta_")).count();
    if k == 0 || cols.len() != 3 + 2 * k {
        return Err(Error::Parse(format!(
            "panel CSV needs K beta_ columns then K x_ columns; got {} columns",
            cols.len()
        )));
    }
    let mut obs = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let what = format!("panel row {}", line + 1);
        let nums: Vec<f64> = rec.iter().skip(3).map(|v| parse_f64(v, &what)).collect::<Result<_>>()?;
        if nums.len() != 2 * k {
            return Err(Error::Parse(format!("{what}: expected {} values", 2 * k)));
        }
        obs.push(PanelObservation {
            agent_id: rec[0].to_string(),
            week: rec[1]
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("{what}: week must be an integer")))?,
            opted_in: parse_bool(&rec[2], &what)?,
            beta: nums[..k].to_vec(),
            x: nums[k..].to_vec(),
        });
    }
    Ok((k, obs))
}

/// `agent_id,z_1..z_P`.
pub fn write_covariates_csv<W: Write>(panel: &PanelDataset, w: W) -> Result<()> {
    let mut out = record_writer(w);
    let mut header = vec!["agent_id".to_string()];
    header.extend(panel.covariate_names.iter().cloned());
    out.write_record(&header).map_err(csv_err)?;
    for (id, z) in &panel.covariates {
        let mut rec = vec![id.clone()];
        rec.extend(z.iter().map(|v| fmt_f64(*v)));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush().map_err(write_err)
}

pub fn read_covariates_csv<R: Read>(r: R) -> Result<(Vec<String>, BTreeMap<String, Vec<f64>>)> {
    let mut rd = reader(r);
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.get(0) != Some("agent_id") {
        return Err(Error::Parse("covariates CSV must start with `agent_id`".into()));
    }
    let names: Vec<String> = header.iter().skip(1).map(String::from).collect();
    let mut map = BTreeMap::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let what = format!("covariates row {}", line + 1);
        let z: Vec<f64> = rec.iter().skip(1).map(|v| parse_f64(v, &what)).collect::<Result<_>>()?;
        if map.insert(rec[0].to_string(), z).is_some() {
            return Err(Error::Parse(format!("{what}: duplicate agent {}", &rec[0])));
        }
    }
    Ok((names, map))
}

pub fn read_panel<R1: Read, R2: Read>(panel: R1, covariates: Option<R2>) -> Result<PanelDataset> {
    let (k, obs) = read_panel_observations(panel)?;
    let (names, map) = match covariates {
        Some(c) => read_covariates_csv(c)?,
        None => (Vec::new(), BTreeMap::new()),
    };
    PanelDataset::new(default_feature_names(k), names, obs, map)
}

/// `agent_id,x_1..x_K` of the fitted bliss points.
pub fn write_bliss_csv<W: Write>(est: &PrimitivesEstimate, w: W) -> Result<()> {
    let mut out = record_writer(w);
    let mut header = vec!["agent_id".to_string()];
    header.extend(est.feature_names.iter().cloned());
    out.write_record(&header).map_err(csv_err)?;
    for (id, b) in &est.primitives.bliss {
        let mut rec = vec![id.clone()];
        rec.extend(b.iter().map(|v| fmt_f64(*v)));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush().map_err(write_err)
}

/// `week,x_1..x_K` of the fitted week effects.
pub fn write_week_effects_csv<W: Write>(est: &PrimitivesEstimate, w: W) -> Result<()> {
    let mut out = record_writer(w);
    let mut header = vec!["week".to_string()];
    header.extend(est.feature_names.iter().cloned());
    out.write_record(&header).map_err(csv_err)?;
    for (week, m) in &est.primitives.week_effects {
        let mut rec = vec![week.to_string()];
        rec.extend(m.iter().map(|v| fmt_f64(*v)));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush().map_err(write_err)
}
