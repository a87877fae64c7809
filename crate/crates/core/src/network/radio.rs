use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Link-layer abstraction: throughput, per-byte energy and a distance-based
/// packet loss curve. Defaults are order-of-magnitude figures, not
/// measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadioProfile {
    pub name: String,
    /// Bytes per second.
    pub data_rate: f64,
    /// Joules per transmitted byte.
    pub tx_energy: f64,
    /// Joules per received byte.
    pub rx_energy: f64,
    /// Metres.
    pub range: f64,
    /// Loss probability at the edge of range.
    pub base_loss: f64,
    pub loss_exponent: f64,
}

impl RadioProfile {
    pub fn ble() -> Self {
        Self {
            name: "ble".into(),
            data_rate: 1_000.0,
            tx_energy: 0.15e-6,
            rx_energy: 0.10e-6,
            range: 30.0,
            base_loss: 0.1,
            loss_exponent: 2.0,
        }
    }

    pub fn lora() -> Self {
        Self {
            name: "lora".into(),
            data_rate: 50.0,
            tx_energy: 2e-6,
            rx_energy: 1e-6,
            range: 2_000.0,
            base_loss: 0.2,
            loss_exponent: 2.0,
        }
    }

    pub fn wifi() -> Self {
        Self {
            name: "wifi".into(),
            data_rate: 100_000.0,
            tx_energy: 0.05e-6,
            rx_energy: 0.05e-6,
            range: 80.0,
            base_loss: 0.05,
            loss_exponent: 2.0,
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "ble" => Some(Self::ble()),
            "lora" => Some(Self::lora()),
            "wifi" => Some(Self::wifi()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.data_rate, self.range];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config(format!("radio {}: rate and range must be positive", self.name)));
        }
        if [self.tx_energy, self.rx_energy, self.loss_exponent]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return Err(Error::config(format!("radio {}: energies and exponent must be nonnegative", self.name)));
        }
        if !(0.0..=1.0).contains(&self.base_loss) {
            return Err(Error::config(format!("radio {}: base loss must lie in [0, 1]", self.name)));
        }
        Ok(())
    }

    /// `base · (distance / range)^exponent`, capped at 1.
    pub fn loss_at(&self, distance: f64) -> f64 {
        if self.base_loss == 0.0 {
            return 0.0;
        }
        (self.base_loss * (distance / self.range).powf(self.loss_exponent)).clamp(0.0, 1.0)
    }

    /// Bytes that fit in one contact window of `seconds`.
    pub fn window_bytes(&self, seconds: f64) -> u64 {
        (self.data_rate * seconds).floor() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_is_a_probability_at_all_distances() {
        for p in [RadioProfile::ble(), RadioProfile::lora(), RadioProfile::wifi()] {
            p.validate().unwrap();
            for d in [0.0, 1.0, p.range * 0.5, p.range, p.range * 10.0] {
                let l = p.loss_at(d);
                assert!((0.0..=1.0).contains(&l));
            }
            assert!((p.loss_at(p.range) - p.base_loss).abs() < 1e-15);
        }
    }

    #[test]
    fn builtin_orderings() {
        let (ble, lora, wifi) = (RadioProfile::ble(), RadioProfile::lora(), RadioProfile::wifi());
        assert!(lora.range > wifi.range && wifi.range > ble.range);
        assert!(wifi.data_rate > ble.data_rate && ble.data_rate > lora.data_rate);
    }
}
