//! Reference worlds for the Monte Carlo tables and comparative-statics figures.

use super::dgp::{CostSpec, DgpConfig, GammaRule};

fn table1_cost() -> Vec<Vec<f64>> {
    vec![vec![1.0, 0.1, 0.2], vec![0.1, 2.0, 0.8], vec![0.2, 0.8, 4.0]]
}

/// Three behaviors; the predictive one is cheap to game for agents with
/// high bliss levels of it.
pub fn table1() -> DgpConfig {
    DgpConfig {
        b0: 0.2,
        b: vec![3.0, 0.1, 0.1],
        bliss_mean: None,
        bliss_cov: vec![vec![1.0, 1.0, 0.1], vec![1.0, 2.0, 1.0], vec![0.1, 1.0, 1.0]],
        cost: CostSpec::from_cost(table1_cost()),
        gamma: GammaRule::Threshold {
            feature: 0,
            cut: 0.2,
            low: 1.0,
            high: 10.0,
        },
        noise_sigma: 0.5,
        n_agents: 10_000,
        seed: 0,
    }
}

/// Same world as [`table1`]; the appendix table differs only in how the
/// industry loop retrains.
pub fn table_a1() -> DgpConfig {
    table1()
}

/// Gaming ability correlated with the outcome noise.
pub fn table_a2() -> DgpConfig {
    DgpConfig {
        b0: 1.0,
        b: vec![0.1, 0.01],
        bliss_mean: None,
        bliss_cov: vec![vec![2.0, 0.5], vec![0.5, 1.0]],
        cost: CostSpec::from_cost(vec![vec![2.0, 0.5], vec![0.5, 1.0]]),
        gamma: GammaRule::Formula {
            u_weight: 0.1,
            noise_cube_weight: 1.0,
            min_gaming: 0.1,
        },
        noise_sigma: 3.0,
        n_agents: 10_000,
        seed: 0,
    }
}

/// Two independent behaviors; x₁ is more predictive but far cheaper to game.
pub fn figure1() -> DgpConfig {
    DgpConfig {
        b0: 0.0,
        b: vec![1.4, 1.0],
        bliss_mean: None,
        bliss_cov: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        cost: CostSpec::from_cost(vec![vec![4.0, 0.0], vec![0.0, 32.0]]),
        gamma: GammaRule::InverseUniform { low: 0.0, high: 10.0 },
        noise_sigma: 0.5,
        n_agents: 10_000,
        seed: 0,
    }
}
