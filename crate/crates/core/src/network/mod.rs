//! Mobility, contacts, lossy transmission and energy accounting.

pub mod energy;
pub mod mobility;
pub mod radio;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use self::energy::{EnergyAccount, EnergyKind, EnergyLedger};
pub use self::mobility::{step_mobility, MobilityModel, MobilityState, TraceRow};
pub use self::radio::RadioProfile;
use crate::error::{Error, Result};
use crate::metrics::RunTrace;

/// Anything with an on-air size.
pub trait HasByteSize {
    fn byte_size(&self) -> u64;
}

impl HasByteSize for u64 {
    fn byte_size(&self) -> u64 {
        *self
    }
}

/// A directed, tick-scoped transmission opportunity `from → to`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactEvent {
    pub time: u64,
    pub from: usize,
    pub to: usize,
    pub distance: f64,
    pub loss_prob: f64,
    pub max_bytes: u64,
}

impl ContactEvent {
    pub fn quality(&self) -> f64 {
        1.0 - self.loss_prob
    }
}

/// Directed contacts for tick `t`, sorted by `(from, to)`.
///
/// `i → j` exists iff node `i`'s transmission reaches `j`: distance at most
/// the sender's range, boundary inclusive. Equal profiles give a symmetric
/// relation; unequal ranges may not. Loss and window size follow the
/// sender's profile. Nodes with `active[i] == false` take no part.
pub fn compute_contacts(
    m: &MobilityState,
    profiles: &[RadioProfile],
    active: &[bool],
    t: u64,
    tick_seconds: f64,
) -> Vec<ContactEvent> {
    let n = m.positions.len();
    let mut out = Vec::new();
    if let MobilityModel::Trace { .. } = m.model {
        for r in m.trace.iter().filter(|r| r.t == t) {
            if r.from >= n || r.to >= n || r.from == r.to || !active[r.from] || !active[r.to] {
                continue;
            }
            let p = &profiles[r.from];
            out.push(ContactEvent {
                time: t,
                from: r.from,
                to: r.to,
                distance: r.distance,
                loss_prob: p.loss_at(r.distance),
                max_bytes: p.window_bytes(tick_seconds),
            });
        }
        out.sort_by_key(|e| (e.from, e.to));
        out.dedup_by_key(|e| (e.from, e.to));
        return out;
    }
    for i in (0..n).filter(|&i| active[i]) {
        let p = &profiles[i];
        for j in (0..n).filter(|&j| j != i && active[j]) {
            let d = m.distance(i, j);
            if d <= p.range {
                out.push(ContactEvent {
                    time: t,
                    from: i,
                    to: j,
                    distance: d,
                    loss_prob: p.loss_at(d),
                    max_bytes: p.window_bytes(tick_seconds),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Delivery {
    Delivered,
    Dropped,
    Truncated,
    /// Sender could not pay for the attempt; nothing was sent.
    NotAttempted,
    /// Receiver could not pay for reception; the packet was lost.
    ReceiverDepleted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transmission {
    pub status: Delivery,
    pub bytes_tx: u64,
    pub bytes_rx: u64,
    pub tx_joules: f64,
    pub rx_joules: f64,
}

impl Transmission {
    pub fn delivered(&self) -> bool {
        self.status == Delivery::Delivered
    }
}

/// Send one packet over `ev`.
///
/// The whole packet is lost with probability `ev.loss_prob`; a packet
/// larger than the window is truncated and counts as undelivered. The
/// sender pays for every byte it puts on air, the receiver only for bytes of
/// a delivered packet. One uniform is always drawn so streams stay aligned.
pub fn transmit<P: HasByteSize + ?Sized>(
    packet: &P,
    ev: &ContactEvent,
    tx: &RadioProfile,
    rx: &RadioProfile,
    sender: &mut EnergyAccount,
    receiver: &mut EnergyAccount,
    rng: &mut impl Rng,
) -> Transmission {
    let u: f64 = rng.random();
    let bytes = packet.byte_size();
    let attempted = bytes.min(ev.max_bytes);
    let tx_joules = attempted as f64 * tx.tx_energy;
    if !sender.can_afford(tx_joules) {
        return Transmission {
            status: Delivery::NotAttempted,
            bytes_tx: 0,
            bytes_rx: 0,
            tx_joules: 0.0,
            rx_joules: 0.0,
        };
    }
    sender.debit(EnergyKind::Tx, tx_joules);
    let mut out = Transmission {
        status: Delivery::Delivered,
        bytes_tx: attempted,
        bytes_rx: 0,
        tx_joules,
        rx_joules: 0.0,
    };
    if bytes > ev.max_bytes {
        out.status = Delivery::Truncated;
        return out;
    }
    if u < ev.loss_prob {
        out.status = Delivery::Dropped;
        return out;
    }
    let rx_joules = bytes as f64 * rx.rx_energy;
    if !receiver.can_afford(rx_joules) {
        out.status = Delivery::ReceiverDepleted;
        return out;
    }
    receiver.debit(EnergyKind::Rx, rx_joules);
    out.bytes_rx = bytes;
    out.rx_joules = rx_joules;
    out
}

/// Double-entry audit: for every node and every recorded tick,
/// `initial − level = step + tx + rx − harvest` to 1e-9 relative.
pub fn energy_ledger_check(trace: &RunTrace) -> Result<()> {
    for r in trace.records.iter() {
        let Some(node) = r.node else { continue };
        let initial = *trace.initial_energy.get(node).ok_or_else(|| Error::Audit {
            node,
            tick: r.tick,
            message: "no initial energy recorded".into(),
        })?;
        let ledger = EnergyLedger {
            step: r.energy_step_j,
            tx: r.energy_tx_j,
            rx: r.energy_rx_j,
            harvest: r.energy_harvest_j,
        };
        let residual = energy::conservation_residual(initial, r.energy_level_j, &ledger);
        if !(residual <= 1e-9) {
            return Err(Error::Audit {
                node,
                tick: r.tick,
                message: format!("relative residual {residual:e}"),
            });
        }
    }
    Ok(())
}

/// Two distinct mutable elements of a slice.
pub(crate) fn pair_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    let [x, y] = v.get_disjoint_mut([a, b]).expect("distinct in-range indices");
    (x, y)
}

/// Three distinct mutable elements of a slice, in argument order.
pub(crate) fn triple_mut<T>(v: &mut [T], a: usize, b: usize, c: usize) -> (&mut T, &mut T, &mut T) {
    let [x, y, z] = v.get_disjoint_mut([a, b, c]).expect("distinct in-range indices");
    (x, y, z)
}
