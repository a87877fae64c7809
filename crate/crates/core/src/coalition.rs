//! Ephemeral clusters, opportunistic coordinators, the trust graph and
//! peer selection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::network::ContactEvent;

pub const DEFAULT_TRUST_DECAY: f64 = 0.9;
pub const DEFAULT_STRANGER_TRUST: f64 = 0.5;
pub const DEFAULT_UTILITY_SCALE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: u64,
    /// Sorted member ids.
    pub members: Vec<usize>,
    pub coordinator: usize,
    pub formed_at: u64,
    pub ttl: u64,
}

impl Cluster {
    pub fn contains(&self, node: usize) -> bool {
        self.members.binary_search(&node).is_ok()
    }
}

/// Undirected adjacency of mutual contacts: `i ~ j` iff both `i → j` and
/// `j → i` exist.
fn symmetric_adjacency(contacts: &[ContactEvent], n: usize) -> Vec<Vec<usize>> {
    let mut directed = vec![Vec::new(); n];
    for c in contacts {
        if c.from < n && c.to < n {
            directed[c.from].push(c.to);
        }
    }
    for d in directed.iter_mut() {
        d.sort_unstable();
    }
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for &j in &directed[i] {
            if i < j && directed[j].binary_search(&i).is_ok() {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    adj
}

/// Connected components of the mutual-contact graph over `active` nodes,
/// each sorted, ordered by smallest member.
pub fn components(contacts: &[ContactEvent], active: &[bool]) -> Vec<Vec<usize>> {
    let n = active.len();
    let adj = symmetric_adjacency(contacts, n);
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if seen[start] || !active[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] && active[v] {
                    seen[v] = true;
                    comp.push(v);
                    stack.push(v);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Highest capacity score, ties to the lowest id.
pub fn pick_coordinator(members: &[usize], capacities: &[f64]) -> usize {
    let mut best = members[0];
    for &m in &members[1..] {
        if capacities[m] > capacities[best] || (capacities[m] == capacities[best] && m < best) {
            best = m;
        }
    }
    best
}

/// Turn the current tick's contacts into clusters: one per connected
/// component of the mutual-contact graph, coordinated by its most capable
/// member. Ids are assigned from `next_id` upward.
pub fn form_clusters(
    contacts: &[ContactEvent],
    capacities: &[f64],
    active: &[bool],
    t: u64,
    ttl: u64,
    next_id: &mut u64,
) -> Vec<Cluster> {
    components(contacts, active)
        .into_iter()
        .map(|members| {
            let coordinator = pick_coordinator(&members, capacities);
            let id = *next_id;
            *next_id += 1;
            Cluster {
                id,
                members,
                coordinator,
                formed_at: t,
                ttl,
            }
        })
        .collect()
}

fn connected_within(members: &[usize], adj: &[Vec<usize>]) -> bool {
    if members.len() <= 1 {
        return true;
    }
    let mut seen = vec![members[0]];
    let mut stack = vec![members[0]];
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if members.binary_search(&v).is_ok() && !seen.contains(&v) {
                seen.push(v);
                stack.push(v);
            }
        }
    }
    seen.len() == members.len()
}

/// Drop clusters whose ttl has run out (`t > formed_at + ttl`) or whose
/// members are no longer linked by mutual contacts.
pub fn dissolve_expired(clusters: &[Cluster], contacts: &[ContactEvent], n: usize, t: u64) -> Vec<Cluster> {
    let adj = symmetric_adjacency(contacts, n);
    clusters
        .iter()
        .filter(|c| t <= c.formed_at.saturating_add(c.ttl))
        .filter(|c| c.members.iter().all(|&m| m < n) && connected_within(&c.members, &adj))
        .cloned()
        .collect()
}

/// Per-node rows of trust toward known peers. Rows are private to their
/// owner; strangers read as `stranger`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustGraph {
    rows: Vec<BTreeMap<usize, f64>>,
    pub decay: f64,
    pub stranger: f64,
}

impl TrustGraph {
    pub fn new(nodes: usize, decay: f64, stranger: f64) -> Self {
        Self {
            rows: vec![BTreeMap::new(); nodes],
            decay,
            stranger,
        }
    }

    pub fn trust(&self, i: usize, j: usize) -> f64 {
        self.rows[i].get(&j).copied().unwrap_or(self.stranger)
    }

    pub fn row(&self, i: usize) -> &BTreeMap<usize, f64> {
        &self.rows[i]
    }

    pub fn node_count(&self) -> usize {
        self.rows.len()
    }

    /// `(i, j, trust)` for every known pair, ordered by `(i, j)`.
    pub fn snapshot(&self) -> Vec<(usize, usize, f64)> {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |(&j, &t)| (i, j, t)))
            .collect()
    }
}

/// Map an accuracy change to a utility in [0, 1] with a logistic squash:
/// `delta ≥ 0` lands in [0.5, 1], `delta < 0` in [0, 0.5).
pub fn utility_from_delta(delta: f64, scale: f64) -> f64 {
    let u = 1.0 / (1.0 + (-delta / scale).exp());
    if delta < 0.0 {
        u.min(0.5f64.next_down())
    } else {
        u.clamp(0.5, 1.0)
    }
}

/// `trust(i,j) ← β·trust(i,j) + (1 − β)·utility`.
pub fn update_trust(g: &mut TrustGraph, i: usize, j: usize, utility: f64) {
    let u = utility.clamp(0.0, 1.0);
    let old = g.trust(i, j);
    let new = (g.decay * old + (1.0 - g.decay) * u).clamp(0.0, 1.0);
    g.rows[i].insert(j, new);
}

/// A peer `i` could receive from this tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub peer: usize,
    /// Delivery probability of the link (or path).
    pub quality: f64,
    pub expected_bytes: u64,
}

impl Candidate {
    pub fn from_contact(ev: &ContactEvent, expected_bytes: u64) -> Self {
        Self {
            peer: ev.from,
            quality: ev.quality(),
            expected_bytes,
        }
    }
}

/// Rank candidates by `trust × quality` (ties to the lowest id) and admit
/// them in order while the cumulative expected bytes stay within `budget`.
/// Candidates with zero score are never admitted.
pub fn select_peers(i: usize, candidates: &[Candidate], g: &TrustGraph, budget: u64) -> Vec<usize> {
    let mut ranked: Vec<(f64, &Candidate)> = candidates
        .iter()
        .map(|c| (g.trust(i, c.peer) * c.quality, c))
        .filter(|(s, _)| *s > 0.0)
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.peer.cmp(&b.1.peer)));
    let mut used = 0u64;
    let mut out = Vec::new();
    for (_, c) in ranked {
        if used + c.expected_bytes > budget {
            break;
        }
        used += c.expected_bytes;
        out.push(c.peer);
    }
    out
}
