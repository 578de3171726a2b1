//! Decision rules that anticipate strategic manipulation by the agents they
//! score, together with simulation and cost-estimation tooling.

pub mod error;
pub mod estimators;
pub mod gmm;
pub mod io;
pub mod model;
pub mod optim;
pub mod simulation;

pub use error::{Error, Result};
pub use model::{Agent, CostModel, DecisionRule, Population};
