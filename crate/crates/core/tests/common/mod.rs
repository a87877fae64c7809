#![allow(dead_code)]

use std::path::PathBuf;

use nodelearn::config::{DataConfig, Generator, NodeTemplate, Partition, Regime, ScenarioConfig, DEFAULT_TEMPLATE};
use nodelearn::engine::Engine;
use nodelearn::exchange::{MergePolicy, WeightRule};
use nodelearn::network::{self, MobilityModel, RadioProfile};

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Lossless radio with enough bandwidth for any packet used in the tests.
pub fn clean_radio(range: f64) -> RadioProfile {
    RadioProfile {
        name: "clean".into(),
        data_rate: 1e9,
        tx_energy: 1e-9,
        rx_energy: 1e-9,
        range,
        base_loss: 0.0,
        loss_exponent: 2.0,
    }
}

pub fn with_radio(mut cfg: ScenarioConfig, radio: RadioProfile) -> ScenarioConfig {
    let name = radio.name.clone();
    cfg.radios.insert(name.clone(), radio);
    let mut t = cfg.template(DEFAULT_TEMPLATE);
    t.radio = name;
    cfg.templates.insert(DEFAULT_TEMPLATE.into(), t);
    cfg
}

pub fn default_template(cfg: &mut ScenarioConfig) -> &mut NodeTemplate {
    cfg.templates.entry(DEFAULT_TEMPLATE.into()).or_default()
}

/// Gaussian one-hot task on a static grid, all nodes within wifi range.
pub fn grid_scenario(n: usize, k: usize, alpha: f64, bayes: f64, seed: u64, ticks: u64) -> ScenarioConfig {
    ScenarioConfig {
        name: format!("grid-{n}"),
        seed,
        node_count: n,
        ticks,
        regime: Regime::NodeLearning,
        data: DataConfig {
            class_count: k,
            feature_dim: k,
            generator: Generator::OneHot {
                separation: None,
                bayes_accuracy: Some(bayes),
                sigma: 1.0,
            },
            partition: Partition::Dirichlet { alpha },
            test_size: 1000,
            validation_size: 50,
            probe_size: 32,
            drift: Vec::new(),
        },
        policy: MergePolicy {
            weights: WeightRule::Metropolis,
            ..Default::default()
        },
        mobility: MobilityModel::StaticGrid { spacing: 20.0 },
        ..Default::default()
    }
}

/// Every ledger identity of a finished engine, from the emitted rows and
/// from the live accounts.
pub fn audit(e: &Engine) -> Result<f64, String> {
    network::energy_ledger_check(&e.trace()).map_err(|err| err.to_string())?;
    let mut worst = 0.0f64;
    for n in &e.state().nodes {
        let r = n.energy.relative_residual();
        if !(r <= 1e-9) {
            return Err(format!("node {} residual {r:e}", n.id));
        }
        worst = worst.max(r);
    }
    nodelearn::metrics::check_monotone(&e.trace().records).map_err(|err| err.to_string())?;
    Ok(worst)
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}
