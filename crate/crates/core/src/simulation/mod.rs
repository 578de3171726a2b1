//! Synthetic worlds from the reference DGPs, the iterated industry approach,
//! Monte Carlo tables, comparative-statics sweeps and transparency bounds.

mod dgp;
mod industry;
pub mod presets;
mod sweep;
mod table;

pub use dgp::{generate_population, CostSpec, DgpConfig, GammaRule};
pub use industry::{run_industry_loop, IndustryConfig, IndustryMode, IndustryRound, IndustryRunReport, FALLBACK_RIDGE};
pub use sweep::{comparative_statics_sweep, sweep_csv, SweepAxis, SweepConfig, SweepEstimator, SweepRow};
pub use table::{
    after_label, run_replication, run_table, table_csv, table_markdown, IndustrySection, MisspecifiedSection,
    RowSummary, RowValue, StableSection, TableReport, TableScenario,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{counterfactual_loss, CostModel, DecisionRule, Population};

/// Cost model a policymaker would use after misjudging costs: off-diagonal
/// costs dropped (when `diagonal_only`) and every cost multiplied by `scale`.
pub fn misspecify_costs(costs: &CostModel, diagonal_only: bool, scale: f64) -> Result<CostModel> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidInput(format!("scale must be positive, got {scale}")));
    }
    let c = costs
        .cost_matrix()
        .ok_or_else(|| Error::Singular { columns: vec!["inverse cost".into()] })?;
    let c = if diagonal_only {
        DMatrix::from_diagonal(&c.diagonal())
    } else {
        c
    };
    CostModel::from_cost_matrix(c * scale)?
        .with_omega(costs.omega().to_vec())?
        .with_gaming_shocks(costs.gaming_shocks().to_vec())?
        .with_feature_names(costs.feature_names().to_vec())
}

/// The manipulation-as-signal experiment for one seed: rows for the true
/// rule, OLS and the strategy-robust rule.
pub fn manipulation_signal_scenario(seed: u64) -> Result<Vec<RowValue>> {
    let scn = TableScenario {
        title: "Manipulation can improve prediction".into(),
        replications: 1,
        dgp: presets::table_a2(),
        industry: None,
        stable: Some(StableSection::default()),
        misspecified: None,
    };
    run_replication(&scn, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransparencyBounds {
    /// RMSE of the disclosed robust rule under predicted manipulation minus
    /// the RMSE of the undisclosed naive rule on unmanipulated behavior.
    pub predicted: f64,
    /// The same difference with the robust rule scored on realized behavior.
    pub equilibrium: f64,
}

/// Upper bounds on the accuracy cost of disclosing the decision rule. When
/// `realized` is given its behaviors are taken as what agents actually did
/// under the robust rule; otherwise agents are assumed to best-respond, and
/// the equilibrium bound equals the predicted one.
pub fn transparency_cost(
    pop: &Population,
    costs: &CostModel,
    naive: &DecisionRule,
    robust: &DecisionRule,
    realized: Option<&Population>,
) -> Result<TransparencyBounds> {
    if naive.dim() != robust.dim() {
        return Err(Error::dim("naive vs robust rule", naive.dim(), robust.dim()));
    }
    let baseline = counterfactual_loss(naive, pop, costs, false, 0.0)?.sqrt();
    let predicted = counterfactual_loss(robust, pop, costs, true, 0.0)?.sqrt() - baseline;
    let equilibrium = match realized {
        Some(r) => counterfactual_loss(robust, r, costs, false, 0.0)?.sqrt() - baseline,
        None => predicted,
    };
    Ok(TransparencyBounds { predicted, equilibrium })
}
