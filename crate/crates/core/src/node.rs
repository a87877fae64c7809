use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::context::ContextVector;
use crate::datagen::Sample;
use crate::model::ModelParams;
use crate::network::energy::EnergyAccount;
use crate::resources::CapacityProfile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub sample: Sample,
    pub synthetic: bool,
}

/// Bounded FIFO of recent real samples plus synthetic samples received from
/// peers.
///
/// Eviction when full: inserting a synthetic entry evicts the oldest
/// synthetic entry if there is one, otherwise the oldest real entry; inserting
/// a real entry evicts the oldest real entry first. Evicted entries are
/// returned to the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<ReplayEntry>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &ReplayEntry> {
        self.entries.iter()
    }

    pub fn real(&self) -> impl Iterator<Item = &Sample> {
        self.entries
            .iter()
            .filter(|e| !e.synthetic)
            .map(|e| &e.sample)
    }

    pub fn synthetic(&self) -> impl Iterator<Item = &Sample> {
        self.entries
            .iter()
            .filter(|e| e.synthetic)
            .map(|e| &e.sample)
    }

    pub fn synthetic_len(&self) -> usize {
        self.entries.iter().filter(|e| e.synthetic).count()
    }

    pub fn push(&mut self, sample: Sample, synthetic: bool) -> Option<ReplayEntry> {
        if self.capacity == 0 {
            return Some(ReplayEntry { sample, synthetic });
        }
        let evicted = if self.entries.len() >= self.capacity {
            let pos = self
                .entries
                .iter()
                .position(|e| e.synthetic == synthetic)
                .unwrap_or(0);
            self.entries.remove(pos)
        } else {
            None
        };
        self.entries.push_back(ReplayEntry { sample, synthetic });
        evicted
    }

    /// Bytes held, at 8 bytes per stored real (features plus label).
    pub fn bytes(&self) -> u64 {
        self.entries
            .iter()
            .map(|e| 8 * (e.sample.x.len() as u64 + 1))
            .sum()
    }
}

/// Everything one node carries between ticks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub id: usize,
    pub params: ModelParams,
    pub context: ContextVector,
    pub energy: EnergyAccount,
    pub capacity: CapacityProfile,
    pub replay: ReplayBuffer,
    pub updates: u64,
    pub skipped: u64,
    pub samples_seen: u64,
    pub alive: bool,
}

impl NodeState {
    pub fn new(id: usize, params: ModelParams, capacity: CapacityProfile, replay_capacity: usize) -> Self {
        let energy = EnergyAccount::new(capacity.battery_j, capacity.battery_j);
        Self {
            id,
            params,
            context: ContextVector::default(),
            energy,
            capacity,
            replay: ReplayBuffer::new(replay_capacity),
            updates: 0,
            skipped: 0,
            samples_seen: 0,
            alive: true,
        }
    }

    /// Resident memory: model, replay buffer.
    pub fn resident_bytes(&self) -> u64 {
        8 * self.params.num_params() as u64 + self.replay.bytes()
    }
}
