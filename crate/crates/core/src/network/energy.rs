//! Battery state with a separate double-entry ledger.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnergyKind {
    Step,
    Tx,
    Rx,
}

/// Cumulative joules per category.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub step: f64,
    pub tx: f64,
    pub rx: f64,
    pub harvest: f64,
}

impl EnergyLedger {
    pub fn consumed(&self) -> f64 {
        self.step + self.tx + self.rx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyAccount {
    capacity: f64,
    initial: f64,
    level: f64,
    pub ledger: EnergyLedger,
}

impl EnergyAccount {
    pub fn new(capacity: f64, initial: f64) -> Self {
        let initial = initial.clamp(0.0, capacity);
        Self {
            capacity,
            initial,
            level: initial,
            ledger: EnergyLedger::default(),
        }
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn initial(&self) -> f64 {
        self.initial
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn fraction(&self) -> f64 {
        if self.capacity > 0.0 {
            (self.level / self.capacity).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    pub fn can_afford(&self, joules: f64) -> bool {
        self.level >= joules
    }

    /// Debit `joules`; callers check affordability first.
    pub fn debit(&mut self, kind: EnergyKind, joules: f64) {
        debug_assert!(joules >= 0.0);
        self.level -= joules;
        match kind {
            EnergyKind::Step => self.ledger.step += joules,
            EnergyKind::Tx => self.ledger.tx += joules,
            EnergyKind::Rx => self.ledger.rx += joules,
        }
    }

    /// Add harvested energy up to capacity; returns the amount stored.
    pub fn harvest(&mut self, joules: f64) -> f64 {
        let stored = joules.max(0.0).min(self.capacity - self.level).max(0.0);
        self.level += stored;
        self.ledger.harvest += stored;
        stored
    }

    /// Conservation residual `(initial − level) − (consumed − harvest)`
    /// relative to the energy scale of the account.
    pub fn relative_residual(&self) -> f64 {
        conservation_residual(self.initial, self.level, &self.ledger)
    }
}

pub fn conservation_residual(initial: f64, level: f64, ledger: &EnergyLedger) -> f64 {
    let lhs = initial - level;
    let rhs = ledger.consumed() - ledger.harvest;
    let scale = initial
        .abs()
        .max(ledger.consumed())
        .max(ledger.harvest)
        .max(f64::MIN_POSITIVE);
    (lhs - rhs).abs() / scale
}
