//! Per-node context vector and the learning gate derived from it.

use serde::{Deserialize, Serialize};

pub const DEFAULT_DECAY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextVector {
    /// Battery level as a fraction of capacity, in [0, 1].
    pub energy_fraction: f64,
    /// EWMA of recent transmission success, in [0, 1].
    pub connectivity_quality: f64,
    /// EWMA of recent loss relative to the running loss baseline.
    pub salience: f64,
    pub mobility_speed: f64,
    pub modality_mask: u32,
    /// Running EWMA of observed loss; `None` until the first observation.
    pub loss_baseline: Option<f64>,
}

impl Default for ContextVector {
    fn default() -> Self {
        Self {
            energy_fraction: 1.0,
            connectivity_quality: 0.5,
            salience: 1.0,
            mobility_speed: 0.0,
            modality_mask: 0,
            loss_baseline: None,
        }
    }
}

/// What a node observed during one tick.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TickObservations {
    /// Change in battery level as a fraction of capacity.
    pub energy_delta: f64,
    pub contact_attempts: u32,
    pub contact_successes: u32,
    pub loss: Option<f64>,
    pub speed: Option<f64>,
}

/// Advance the context by one tick with EWMA decay `decay`.
///
/// Without contact attempts connectivity decays toward zero; without a loss
/// observation salience decays toward the neutral ratio 1.
pub fn update_context(c: &ContextVector, obs: &TickObservations, decay: f64) -> ContextVector {
    let mut next = c.clone();
    next.energy_fraction = (c.energy_fraction + obs.energy_delta).clamp(0.0, 1.0);

    let success = if obs.contact_attempts > 0 {
        f64::from(obs.contact_successes.min(obs.contact_attempts)) / f64::from(obs.contact_attempts)
    } else {
        0.0
    };
    next.connectivity_quality =
        (decay * c.connectivity_quality + (1.0 - decay) * success).clamp(0.0, 1.0);

    let ratio = match (obs.loss, c.loss_baseline) {
        (Some(l), Some(b)) if b > 0.0 => l / b,
        _ => 1.0,
    };
    next.salience = (decay * c.salience + (1.0 - decay) * ratio).max(0.0);
    if let Some(l) = obs.loss {
        next.loss_baseline = Some(match c.loss_baseline {
            Some(b) => decay * b + (1.0 - decay) * l,
            None => l,
        });
    }
    if let Some(s) = obs.speed {
        next.mobility_speed = s.max(0.0);
    }
    next
}

/// Learning gate ω = energy-fraction × min(1, salience).
pub fn gate(c: &ContextVector) -> f64 {
    (c.energy_fraction.clamp(0.0, 1.0) * c.salience.clamp(0.0, 1.0)).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ctx(energy: f64, salience: f64) -> ContextVector {
        ContextVector {
            energy_fraction: energy,
            salience,
            ..Default::default()
        }
    }

    #[test]
    fn gate_examples() {
        assert_eq!(gate(&ctx(0.0, 5.0)), 0.0);
        assert_eq!(gate(&ctx(1.0, 1.0)), 1.0);
        assert_eq!(gate(&ctx(1.0, 3.0)), 1.0);
        assert!((gate(&ctx(0.5, 0.6)) - 0.3).abs() < 1e-15);
        assert_eq!(gate(&ctx(0.7, 0.0)), 0.0);
    }

    #[test]
    fn no_observations_decay_only() {
        let c = ContextVector {
            connectivity_quality: 0.8,
            salience: 2.0,
            energy_fraction: 0.6,
            ..Default::default()
        };
        let n = update_context(&c, &TickObservations::default(), DEFAULT_DECAY);
        assert_eq!(n.energy_fraction, 0.6);
        assert!((n.connectivity_quality - 0.72).abs() < 1e-15);
        assert!((n.salience - 1.9).abs() < 1e-15);
    }

    #[test]
    fn loss_spike_raises_salience() {
        let c = ContextVector {
            loss_baseline: Some(0.5),
            ..Default::default()
        };
        let obs = TickObservations {
            loss: Some(5.0),
            ..Default::default()
        };
        let n = update_context(&c, &obs, DEFAULT_DECAY);
        assert!(n.salience > c.salience);
    }

    #[test]
    fn energy_is_clamped() {
        let c = ctx(0.4, 1.0);
        let obs = TickObservations {
            energy_delta: -1.0,
            ..Default::default()
        };
        assert_eq!(update_context(&c, &obs, DEFAULT_DECAY).energy_fraction, 0.0);
    }

    proptest! {
        #[test]
        fn gate_in_unit_interval_and_monotone(e in 0.0f64..=1.0, s in 0.0f64..3.0, de in 0.0f64..0.5, ds in 0.0f64..0.5) {
            let w = gate(&ctx(e, s));
            prop_assert!((0.0..=1.0).contains(&w));
            prop_assert!(gate(&ctx((e + de).min(1.0), s)) >= w);
            prop_assert!(gate(&ctx(e, s + ds)) >= w);
        }

        #[test]
        fn update_is_deterministic(loss in 0.0f64..10.0, att in 0u32..5, succ in 0u32..5, de in -2.0f64..2.0) {
            let c = ContextVector { loss_baseline: Some(1.0), ..Default::default() };
            let obs = TickObservations { energy_delta: de, contact_attempts: att, contact_successes: succ, loss: Some(loss), speed: None };
            let a = update_context(&c, &obs, DEFAULT_DECAY);
            prop_assert_eq!(a.clone(), update_context(&c, &obs, DEFAULT_DECAY));
            prop_assert!((0.0..=1.0).contains(&a.energy_fraction));
            prop_assert!((0.0..=1.0).contains(&a.connectivity_quality));
            prop_assert!(a.salience >= 0.0);
        }
    }
}
