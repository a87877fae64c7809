//! Tick-synchronous simulation loop.
//!
//! Every tick runs the same phases in the same order:
//!
//! 1. mobility step
//! 2. contact computation
//! 3. cluster formation and dissolution, role rotation
//! 4. data sampling, context update and local steps, node by node
//! 5. peer selection and packet transmission, direct or relayed
//! 6. merges, receivers in id order, packets in source-id order
//! 7. trust updates
//! 8. metric emission
//! 9. drift scheduled for the next tick
//!
//! The regime only changes phases 5 to 7: isolated skips them, federated
//! replaces them with a server round, gossip averages over every neighbour
//! without selection or trust.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coalition::{self, Candidate, Cluster, TrustGraph};
use crate::config::{self, Regime, Resolved, ScenarioConfig, ServerKind};
use crate::context::{self, TickObservations};
use crate::datagen::{self, DataStreamSpec, Sample};
use crate::error::{Error, Result};
use crate::exchange::{
    self, byte_size_for, ContextSummary, KnowledgePacket, MergeKind, MergePolicy, MergeReport, MergeWeights,
    PacketKind, PacketRecord, ParamShape, Payload, ProbeSet, WeightRule,
};
use crate::metrics::{self, Event, MetricRecord, RunTrace};
use crate::model::{self, SkipReason, StepOutcome};
use crate::network::{self, ContactEvent, Delivery, EnergyKind, MobilityState, Transmission};
use crate::node::NodeState;
use crate::resources::{self, OffloadStore};
use crate::rng::{self, Subsystem};

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const OUTPUT_FORMAT: u32 = 1;
const MAX_STEPS_PER_TICK: usize = 64;

/// Federated server bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    /// Hosting node for a proxy server.
    pub hub: Option<usize>,
    pub lost: bool,
}

/// Everything that evolves during a run. Caches derived from it are rebuilt
/// on restore, so this is all a checkpoint holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub tick: u64,
    pub nodes: Vec<NodeState>,
    pub mobility: MobilityState,
    pub clusters: Vec<Cluster>,
    pub next_cluster_id: u64,
    pub sleeping: Vec<bool>,
    pub trust: TrustGraph,
    pub offload: OffloadStore,
    pub pending_offload: Vec<Vec<Sample>>,
    /// Current data-generating process, drift applied.
    pub spec: DataStreamSpec,
    /// Number of drifts applied so far.
    pub epoch: u64,
    pub probe: ProbeSet,
    /// Transmission attempts and successes per sender, last exchange.
    pub link_stats: Vec<(u32, u32)>,
    pub bytes_tx: Vec<u64>,
    pub bytes_rx: Vec<u64>,
    /// Samples consumed by applied steps this tick.
    pub round_samples: Vec<u64>,
    pub skip_logged: Vec<bool>,
    pub server: Option<ServerState>,
    pub garbage: BTreeMap<usize, Vec<f64>>,
    pub records: Vec<MetricRecord>,
    pub events: Vec<Event>,
    /// Delivered packets, payloads elided unless requested.
    pub packets: Vec<PacketRecord>,
    /// `(source, weight)` per receiver from the latest exchange.
    pub merge_weights: Vec<Vec<(usize, f64)>>,
    pub drift_ticks: Vec<u64>,
    pub initial_energy: Vec<f64>,
    pub finished: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub node_count: usize,
    pub state: SimState,
}

#[derive(Debug, Clone)]
struct Cache {
    test: Vec<Sample>,
    test_views: Vec<Option<Vec<Sample>>>,
    validation: Vec<Vec<Sample>>,
    probe_views: Vec<ProbeSet>,
}

pub struct Engine {
    cfg: ScenarioConfig,
    resolved: Resolved,
    state: SimState,
    cache: Cache,
    packet_payloads: bool,
}

fn build_cache(cfg: &ScenarioConfig, state: &SimState) -> Cache {
    let spec = &state.spec;
    let test = datagen::test_set(spec, cfg.data.test_size, state.epoch);
    let n = state.nodes.len();
    let test_views = (0..n)
        .map(|i| {
            spec.mask(i).map(|m| {
                test.iter()
                    .map(|s| {
                        let mut x = s.x.clone();
                        datagen::apply_mask(&mut x, Some(m));
                        Sample { x, y: s.y }
                    })
                    .collect()
            })
        })
        .collect();
    let validation = (0..n)
        .map(|i| datagen::validation_slice(spec, i, cfg.data.validation_size, state.epoch))
        .collect();
    let probe_views = (0..n).map(|i| state.probe.masked(spec.mask(i))).collect();
    Cache {
        test,
        test_views,
        validation,
        probe_views,
    }
}

/// The node with the most outgoing contacts at tick 0, ties to the lowest
/// id; hosts the proxy server of a federated run.
pub fn best_connected_hub(cfg: &ScenarioConfig) -> Result<Option<usize>> {
    let resolved = config::resolve(cfg)?;
    let m = MobilityState::new(cfg.mobility.clone(), cfg.node_count, cfg.seed, resolved.trace.clone())?;
    let radios: Vec<_> = resolved.nodes.iter().map(|s| s.radio.clone()).collect();
    let contacts = network::compute_contacts(&m, &radios, &vec![true; cfg.node_count], 0, cfg.tick_seconds);
    Ok(hub_from_contacts(&contacts, cfg.node_count))
}

fn hub_from_contacts(contacts: &[ContactEvent], n: usize) -> Option<usize> {
    let mut deg = vec![0usize; n];
    for c in contacts {
        deg[c.from] += 1;
    }
    (0..n).max_by(|&a, &b| deg[a].cmp(&deg[b]).then(b.cmp(&a)))
}

fn garbage_params(seed: u64, node: usize, len: usize, scale: f64) -> Vec<f64> {
    let mut r = rng::stream(seed, Subsystem::Adversary, node as u64, 0);
    (0..len).map(|_| scale * r.random_range(-1.0..1.0)).collect()
}

/// A route from `peer` to the receiver, optionally through `via`.
#[derive(Debug, Clone, Copy)]
struct Route {
    peer: usize,
    via: Option<usize>,
    quality: f64,
}

fn apply_merge(
    node: &mut NodeState,
    packets: &[&KnowledgePacket],
    weights: &MergeWeights,
    policy: &MergePolicy,
    probe: &ProbeSet,
) -> Result<MergeReport> {
    Ok(match policy.kind {
        MergeKind::Average => exchange::merge_average(node, packets, weights),
        MergeKind::Distill => exchange::merge_distill(node, packets, weights, policy, probe),
        MergeKind::Trunk => exchange::merge_trunk(node, packets, weights)?,
        MergeKind::Prototype => exchange::merge_prototype(node, packets, weights, policy),
        MergeKind::None => MergeReport::default(),
    })
}

impl Engine {
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        let issues = config::validate(&cfg);
        if !issues.is_empty() {
            return Err(Error::Invalid { issues });
        }
        let resolved = config::resolve(&cfg)?;
        let n = cfg.node_count;
        let seed = cfg.seed;
        let (d, k) = (resolved.spec.feature_dim, resolved.spec.class_count);
        let shared = cfg.shared_init || cfg.regime == Regime::Federated;
        let mut nodes = Vec::with_capacity(n);
        for (i, setup) in resolved.nodes.iter().enumerate() {
            let init_seed = rng::derive(seed, Subsystem::Init, if shared { u64::MAX } else { i as u64 });
            let params = model::init_params(init_seed, &setup.training, d, k)?;
            nodes.push(NodeState::new(i, params, setup.capacity.clone(), cfg.replay_capacity));
        }
        let mut spec = resolved.spec.clone();
        let probe = ProbeSet::new(datagen::probe_set(&spec, cfg.data.probe_size))?;
        let mut drift_ticks = Vec::new();
        let mut epoch = 0;
        if spec.drift.first().is_some_and(|e| e.tick == 0) {
            spec = datagen::inject_drift(&spec, 0)?;
            epoch = 1;
            drift_ticks.push(0);
        }
        let mobility = MobilityState::new(cfg.mobility.clone(), n, seed, resolved.trace.clone())?;
        let server = (cfg.regime == Regime::Federated).then(|| {
            let hub = match cfg.federated.server {
                ServerKind::Virtual => None,
                ServerKind::Proxy => {
                    let radios: Vec<_> = resolved.nodes.iter().map(|s| s.radio.clone()).collect();
                    let contacts = network::compute_contacts(&mobility, &radios, &vec![true; n], 0, cfg.tick_seconds);
                    hub_from_contacts(&contacts, n)
                }
            };
            ServerState { hub, lost: false }
        });
        let garbage = cfg
            .adversaries
            .iter()
            .map(|a| (a.node, garbage_params(seed, a.node, nodes[a.node].params.num_params(), a.scale)))
            .collect();
        let state = SimState {
            tick: 0,
            initial_energy: nodes.iter().map(|s| s.energy.initial()).collect(),
            nodes,
            mobility,
            clusters: Vec::new(),
            next_cluster_id: 0,
            sleeping: vec![false; n],
            trust: TrustGraph::new(n, cfg.coalition.trust_decay, cfg.coalition.stranger_trust),
            offload: OffloadStore::default(),
            pending_offload: vec![Vec::new(); n],
            spec,
            epoch,
            probe,
            link_stats: vec![(0, 0); n],
            bytes_tx: vec![0; n],
            bytes_rx: vec![0; n],
            round_samples: vec![0; n],
            skip_logged: vec![false; n],
            server,
            garbage,
            records: Vec::new(),
            events: Vec::new(),
            packets: Vec::new(),
            merge_weights: vec![Vec::new(); n],
            drift_ticks,
            finished: false,
        };
        let cache = build_cache(&cfg, &state);
        let mut engine = Self {
            cfg,
            resolved,
            state,
            cache,
            packet_payloads: false,
        };
        if let Some(hub) = engine.state.server.as_ref().and_then(|s| s.hub) {
            engine.log(Event::new(0, "server-proxy").node(hub));
        }
        Ok(engine)
    }

    /// Resume from a checkpoint taken under the same config.
    pub fn restore(cfg: ScenarioConfig, cp: Checkpoint) -> Result<Self> {
        if cp.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT})",
                cp.format_version
            )));
        }
        if cp.node_count != cfg.node_count || cp.state.nodes.len() != cfg.node_count {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} nodes but the config asks for {}",
                cp.node_count, cfg.node_count
            )));
        }
        let issues = config::validate(&cfg);
        if !issues.is_empty() {
            return Err(Error::Invalid { issues });
        }
        let resolved = config::resolve(&cfg)?;
        let cache = build_cache(&cfg, &cp.state);
        Ok(Self {
            cfg,
            resolved,
            state: cp.state,
            cache,
            packet_payloads: false,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT,
            node_count: self.state.nodes.len(),
            state: self.state.clone(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.checkpoint())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        match v.get("format_version").and_then(|f| f.as_u64()) {
            Some(f) if f == u64::from(CHECKPOINT_FORMAT) => Ok(serde_json::from_value(v)?),
            Some(f) => Err(Error::Checkpoint(format!(
                "checkpoint format {f} is not supported (expected {CHECKPOINT_FORMAT})"
            ))),
            None => Err(Error::Checkpoint("not a checkpoint file".into())),
        }
    }

    /// Keep packet payloads in the exchange trace.
    pub fn with_packet_payloads(mut self, on: bool) -> Self {
        self.packet_payloads = on;
        self
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn into_state(self) -> SimState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.finished || self.state.tick >= self.cfg.ticks
    }

    pub fn trace(&self) -> RunTrace {
        RunTrace {
            records: self.state.records.clone(),
            initial_energy: self.state.initial_energy.clone(),
            drift_ticks: self.state.drift_ticks.clone(),
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.state.events
    }

    /// Current balanced test set (unmasked).
    pub fn test_set(&self) -> &[Sample] {
        &self.cache.test
    }

    fn log(&mut self, e: Event) {
        self.state.events.push(e);
    }

    /// Run to `ticks` or until the contact trace ends.
    pub fn run(&mut self) -> Result<RunTrace> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(self.trace())
    }

    /// Run until the state reaches `tick` (or the run ends).
    pub fn run_until(&mut self, tick: u64) -> Result<()> {
        while !self.is_done() && self.state.tick < tick {
            self.step()?;
        }
        Ok(())
    }

    /// Advance one tick. Errors only on internal faults; operational
    /// failures become events.
    pub fn step(&mut self) -> Result<()> {
        if self.is_done() {
            return Err(Error::usage("run already complete"));
        }
        let t = self.state.tick;
        self.apply_dropout(t);

        // 1. mobility
        if t > 0 {
            self.state.mobility = network::step_mobility(&self.state.mobility, self.cfg.tick_seconds)?;
        }
        if self.state.mobility.exhausted() {
            self.state.finished = true;
            self.log(Event::new(t, "trace-exhausted"));
            return Ok(());
        }

        // 2. contacts
        let alive: Vec<bool> = self.state.nodes.iter().map(|s| s.alive).collect();
        let radios: Vec<_> = self.resolved.nodes.iter().map(|s| s.radio.clone()).collect();
        let contacts = network::compute_contacts(&self.state.mobility, &radios, &alive, t, self.cfg.tick_seconds);
        if t == 0 && self.cfg.regime == Regime::Gossip && coalition::components(&contacts, &alive).len() > 1 {
            self.log(Event::new(t, "disconnected-topology").detail("consensus not expected"));
        }

        // 3. clusters and duty
        self.update_clusters(t, &contacts, &alive);

        // 4. local learning
        for i in 0..self.state.nodes.len() {
            if self.state.nodes[i].alive {
                self.learn(i, t, &contacts)?;
            }
        }

        // 5-7. exchange
        let exchange_tick = t % self.cfg.exchange.every == 0;
        match self.cfg.regime {
            Regime::Isolated => {}
            Regime::Federated => {
                if exchange_tick {
                    self.federated_round(t)?;
                }
            }
            Regime::Gossip | Regime::NodeLearning => {
                if exchange_tick {
                    self.exchange(t, &contacts)?;
                } else {
                    self.state.link_stats.iter_mut().for_each(|s| *s = (0, 0));
                }
            }
        }

        // 8. metrics
        if t % self.cfg.metrics.cadence == 0 || t + 1 == self.cfg.ticks {
            self.emit_metrics(t)?;
        }

        // 9. drift taking effect next tick
        if self.state.spec.drift.first().is_some_and(|e| e.tick == t + 1) {
            self.state.spec = datagen::inject_drift(&self.state.spec, t + 1)?;
            self.state.epoch += 1;
            self.state.drift_ticks.push(t + 1);
            self.cache = build_cache(&self.cfg, &self.state);
            self.log(Event::new(t + 1, "drift").detail(format!("epoch {}", self.state.epoch)));
        }

        self.state.tick += 1;
        Ok(())
    }

    fn apply_dropout(&mut self, t: u64) {
        let due: Vec<usize> = self
            .cfg
            .dropout
            .iter()
            .filter(|e| e.tick == t)
            .flat_map(|e| e.nodes.iter().copied())
            .collect();
        for i in due {
            if self.state.nodes[i].alive {
                self.state.nodes[i].alive = false;
                self.state.offload.drop_node(i);
                self.log(Event::new(t, "dropout").node(i));
            }
        }
    }

    fn update_clusters(&mut self, t: u64, contacts: &[ContactEvent], alive: &[bool]) {
        let n = self.state.nodes.len();
        let survivors = coalition::dissolve_expired(&self.state.clusters, contacts, n, t);
        let caps: Vec<f64> = self.state.nodes.iter().map(|s| s.capacity.compute_score).collect();
        let mut next = Vec::new();
        for comp in coalition::components(contacts, alive) {
            if let Some(c) = survivors.iter().find(|c| c.members == comp) {
                next.push(c.clone());
            } else {
                let id = self.state.next_cluster_id;
                self.state.next_cluster_id += 1;
                next.push(Cluster {
                    id,
                    coordinator: coalition::pick_coordinator(&comp, &caps),
                    members: comp,
                    formed_at: t,
                    ttl: self.cfg.coalition.ttl,
                });
            }
        }
        let mut sleeping = vec![false; n];
        let mut idle = Vec::new();
        if self.cfg.coalition.rotation {
            for c in next.iter_mut() {
                let duty = resources::rotate_roles(
                    c,
                    |m| self.state.nodes[m].energy.fraction(),
                    self.cfg.coalition.sleep_threshold,
                );
                for s in duty.sleeping {
                    sleeping[s] = true;
                }
                match duty.coordinator {
                    Some(k) => c.coordinator = k,
                    None if c.members.len() > 1 => idle.push(c.id),
                    None => {}
                }
            }
        }
        for id in idle {
            self.log(Event::new(t, "cluster-idle").detail(format!("cluster {id}")));
        }
        self.state.sleeping = sleeping;
        self.state.clusters = next;

        let mutual = |a: usize, b: usize| {
            contacts.iter().any(|c| c.from == a && c.to == b) && contacts.iter().any(|c| c.from == b && c.to == a)
        };
        let dropped = self.state.offload.expire(t, mutual);
        for (owner, host) in dropped {
            self.log(Event::new(t, "lease-dropped").node(owner).peer(host));
        }
        for i in 0..n {
            if contacts.iter().any(|c| c.from == i || c.to == i) {
                for host in self.state.offload.take_stale(i) {
                    self.log(Event::new(t, "stale-data").node(i).peer(host));
                }
            }
        }
    }

    fn steps_for(&self, i: usize) -> usize {
        if self.cfg.regime == Regime::Federated {
            self.cfg.federated.local_steps
        } else {
            let s = self.state.nodes[i].capacity.compute_score.floor();
            (s.max(0.0) as usize).min(MAX_STEPS_PER_TICK)
        }
    }

    fn learn(&mut self, i: usize, t: u64, contacts: &[ContactEvent]) -> Result<()> {
        let training = self.resolved.nodes[i].training.clone();
        let b = training.batch_size;
        let steps = self.steps_for(i);
        let fresh = datagen::node_batch(&self.state.spec, i, t, b * steps.max(1));
        let speed = self.state.mobility.speeds.get(i).copied().unwrap_or(0.0);
        let (attempts, successes) = self.state.link_stats[i];

        let retrieved: Vec<Sample> = if self.cfg.exchange.offload {
            let hosts = self.state.offload.hosts_of(i);
            let mut out = Vec::new();
            for h in hosts {
                let linked = contacts.iter().any(|c| c.from == h && c.to == i);
                out.extend(self.state.offload.retrieve(i, h, t, linked));
            }
            out.truncate(b);
            out
        } else {
            Vec::new()
        };

        let node = &mut self.state.nodes[i];
        node.energy.harvest(node.capacity.harvest_j_per_tick);
        let loss = model::loss(&node.params, &fresh[..b], &training)?;
        let obs = TickObservations {
            energy_delta: node.energy.fraction() - node.context.energy_fraction,
            contact_attempts: attempts,
            contact_successes: successes,
            loss: Some(loss),
            speed: Some(speed),
        };
        node.context = context::update_context(&node.context, &obs, self.cfg.context_decay);
        for s in &fresh[..b] {
            if let Some(evicted) = node.replay.push(s.clone(), false) {
                if self.cfg.exchange.offload && !evicted.synthetic {
                    self.state.pending_offload[i].push(evicted.sample);
                }
            }
        }
        let synthetic: Vec<Sample> = {
            let all: Vec<&Sample> = node.replay.synthetic().collect();
            all[all.len().saturating_sub(b)..].iter().map(|s| (*s).clone()).collect()
        };

        let mut used = 0u64;
        let mut skip = None;
        for s in 0..steps {
            let mut batch = fresh[s * b..(s + 1) * b].to_vec();
            batch.extend(synthetic.iter().cloned());
            if s == 0 {
                batch.extend(retrieved.iter().cloned());
            }
            match model::local_step(node, &batch, &training, self.cfg.gating)? {
                StepOutcome::Applied { .. } => used += b as u64,
                StepOutcome::Skipped(r) => skip = Some(r),
            }
        }
        self.state.round_samples[i] = used;
        match skip {
            Some(r) if !self.state.skip_logged[i] => {
                self.state.skip_logged[i] = true;
                let why = match r {
                    SkipReason::InsufficientEnergy => "insufficient energy",
                    SkipReason::ZeroGate => "zero gate",
                };
                self.log(Event::new(t, "skipped-update").node(i).detail(why));
            }
            None if used > 0 => self.state.skip_logged[i] = false,
            _ => {}
        }
        Ok(())
    }

    fn encode(&self, i: usize, kind: PacketKind, degree: usize) -> Result<KnowledgePacket> {
        let node = &self.state.nodes[i];
        if let (PacketKind::FullParams, Some(g)) = (kind, self.state.garbage.get(&i)) {
            return Ok(KnowledgePacket::new(
                kind,
                Payload::Params(g.clone()),
                ParamShape::of(&node.params),
                i,
                node.params.version,
                ContextSummary {
                    energy_fraction: node.context.energy_fraction,
                    connectivity_quality: node.context.connectivity_quality,
                    salience: node.context.salience,
                    degree,
                },
            ));
        }
        exchange::encode_packet(node, kind, &self.cache.probe_views[i], degree)
    }

    fn record_tx(&mut self, t: u64, from: usize, to: usize, tx: &Transmission) {
        self.state.bytes_tx[from] += tx.bytes_tx;
        self.state.bytes_rx[to] += tx.bytes_rx;
        let what = match tx.status {
            Delivery::Delivered => return,
            Delivery::Dropped => "packet-lost",
            Delivery::Truncated => "packet-truncated",
            Delivery::NotAttempted => "send-skipped",
            Delivery::ReceiverDepleted => "receiver-depleted",
        };
        self.log(Event::new(t, what).node(from).peer(to));
    }

    fn exchange(&mut self, t: u64, contacts: &[ContactEvent]) -> Result<()> {
        let n = self.state.nodes.len();
        let gossip = self.cfg.regime == Regime::Gossip;
        let Some(kind) = self.cfg.policy.kind.packet_kind() else {
            return Ok(());
        };
        let awake: Vec<bool> = (0..n).map(|i| self.state.nodes[i].alive && !self.state.sleeping[i]).collect();
        let live: BTreeMap<(usize, usize), &ContactEvent> = contacts
            .iter()
            .filter(|c| awake[c.from] && awake[c.to])
            .map(|c| ((c.from, c.to), c))
            .collect();
        let mut degree = vec![0usize; n];
        for &(from, _) in live.keys() {
            degree[from] += 1;
        }

        let mut packets: Vec<Option<KnowledgePacket>> = vec![None; n];
        for i in 0..n {
            if !awake[i] || degree[i] == 0 {
                continue;
            }
            match self.encode(i, kind, degree[i]) {
                Ok(p) => packets[i] = Some(p),
                Err(e) => self.log(Event::new(t, "encode-failed").node(i).detail(e.to_string())),
            }
        }

        if self.cfg.exchange.offload && !gossip {
            self.offload_phase(t, &live, &awake);
        }

        let mut stats = vec![(0u32, 0u32); n];
        let mut inbox: Vec<Vec<KnowledgePacket>> = vec![Vec::new(); n];
        let clusters = self.state.clusters.clone();
        let cluster_of: BTreeMap<usize, &Cluster> = clusters
            .iter()
            .flat_map(|c| c.members.iter().map(move |&m| (m, c)))
            .collect();
        let budget = self.cfg.exchange.budget_bytes.unwrap_or(u64::MAX);
        let radios: Vec<_> = self.resolved.nodes.iter().map(|s| s.radio.clone()).collect();
        for j in 0..n {
            if !awake[j] {
                continue;
            }
            let mut routes: Vec<Route> = live
                .range((0, 0)..)
                .filter(|(&(_, to), _)| to == j)
                .filter(|(&(from, _), _)| packets[from].is_some())
                .map(|(&(from, _), c)| Route {
                    peer: from,
                    via: None,
                    quality: c.quality(),
                })
                .collect();
            if self.cfg.exchange.relays && !gossip {
                if let Some(cl) = cluster_of.get(&j) {
                    let r = cl.coordinator;
                    if r != j && awake[r] {
                        for &i in &cl.members {
                            if i == j || i == r || packets[i].is_none() || live.contains_key(&(i, j)) {
                                continue;
                            }
                            if let (Some(a), Some(b)) = (live.get(&(i, r)), live.get(&(r, j))) {
                                routes.push(Route {
                                    peer: i,
                                    via: Some(r),
                                    quality: a.quality() * b.quality(),
                                });
                            }
                        }
                    }
                }
            }
            let selected: Vec<usize> = if gossip {
                routes.iter().map(|r| r.peer).collect()
            } else {
                let cands: Vec<Candidate> = routes
                    .iter()
                    .map(|r| Candidate {
                        peer: r.peer,
                        quality: r.quality,
                        expected_bytes: packets[r.peer].as_ref().map_or(0, |p| p.byte_size),
                    })
                    .collect();
                coalition::select_peers(j, &cands, &self.state.trust, budget)
            };
            for peer in selected {
                let route = *routes.iter().find(|r| r.peer == peer).expect("selected from routes");
                let packet = packets[peer].as_ref().expect("route has a packet");
                let counter = (t << 20) | j as u64;
                match route.via {
                    None => {
                        let ev = live[&(peer, j)];
                        let mut r = rng::stream(self.cfg.seed, Subsystem::Link, peer as u64, counter);
                        let (s, d) = network::pair_mut(&mut self.state.nodes, peer, j);
                        let tx = network::transmit(packet, ev, &radios[peer], &radios[j], &mut s.energy, &mut d.energy, &mut r);
                        stats[peer].0 += 1;
                        if tx.delivered() {
                            stats[peer].1 += 1;
                            self.state.packets.push(PacketRecord::new(t, j, packet, self.packet_payloads));
                            inbox[j].push(packet.clone());
                        }
                        self.record_tx(t, peer, j, &tx);
                    }
                    Some(via) => {
                        let (e1, e2) = (live[&(peer, via)], live[&(via, j)]);
                        let mut r = rng::stream(self.cfg.seed, Subsystem::Relay, peer as u64, counter);
                        let (s, m, d) = network::triple_mut(&mut self.state.nodes, peer, via, j);
                        let out = resources::relay_forward(
                            packet,
                            e1,
                            e2,
                            (&radios[peer], &radios[via], &radios[j]),
                            &mut s.energy,
                            &mut m.energy,
                            &mut d.energy,
                            &mut r,
                        );
                        stats[peer].0 += 1;
                        if out.delivered {
                            stats[peer].1 += 1;
                            self.state.packets.push(PacketRecord::new(t, j, packet, self.packet_payloads));
                            inbox[j].push(packet.clone());
                        } else {
                            self.log(Event::new(t, "relay-failed").node(peer).peer(j).detail(format!("via {via}")));
                        }
                        if let Some(tx) = out.first {
                            self.state.bytes_tx[peer] += tx.bytes_tx;
                            self.state.bytes_rx[via] += tx.bytes_rx;
                        }
                        if let Some(tx) = out.second {
                            self.state.bytes_tx[via] += tx.bytes_tx;
                            self.state.bytes_rx[j] += tx.bytes_rx;
                        }
                    }
                }
            }
        }
        self.state.link_stats = stats;

        // 6. merges
        let policy = self.cfg.policy.clone();
        let rule = if gossip && policy.weights == WeightRule::TrustContext {
            WeightRule::Metropolis
        } else {
            policy.weights
        };
        let scale = self.cfg.coalition.utility_scale;
        let mut utilities = Vec::new();
        let mut merge_weights = vec![Vec::new(); n];
        for (j, mut inbound) in inbox.into_iter().enumerate() {
            if inbound.is_empty() {
                continue;
            }
            inbound.sort_by_key(|p| p.source);
            let pk: Vec<&KnowledgePacket> = inbound.iter().collect();
            let w = exchange::compute_weights(degree[j], &pk, rule, |s| self.state.trust.trust(j, s));
            if w.fallback {
                self.log(Event::new(t, "trust-fallback").node(j));
            }
            merge_weights[j] = pk.iter().map(|p| p.source).zip(w.peers.iter().copied()).collect();
            let probe = &self.cache.probe_views[j];
            if !gossip {
                let val = &self.cache.validation[j];
                let before = model::evaluate_accuracy(&self.state.nodes[j].params, val)?;
                let pair = MergeWeights {
                    self_weight: 0.5,
                    peers: vec![0.5],
                    fallback: false,
                };
                for p in &pk {
                    let mut trial = self.state.nodes[j].clone();
                    let rep = apply_merge(&mut trial, &[*p], &pair, &policy, probe)?;
                    if rep.accepted.is_empty() {
                        continue;
                    }
                    let after = model::evaluate_accuracy(&trial.params, val)?;
                    utilities.push((j, p.source, coalition::utility_from_delta(after - before, scale)));
                }
            }
            let report = apply_merge(&mut self.state.nodes[j], &pk, &w, &policy, probe)?;
            for (src, why) in &report.rejected {
                self.log(Event::new(t, "packet-rejected").node(j).peer(*src).detail(why.clone()));
            }
            if !report.accepted.is_empty() {
                self.log(
                    Event::new(t, "merge")
                        .node(j)
                        .detail(format!("{} packets, {} bytes", report.accepted.len(), report.bytes)),
                );
            }
        }

        self.state.merge_weights = merge_weights;

        // 7. trust
        for (j, s, u) in utilities {
            coalition::update_trust(&mut self.state.trust, j, s, u);
        }
        Ok(())
    }

    fn offload_phase(&mut self, t: u64, live: &BTreeMap<(usize, usize), &ContactEvent>, awake: &[bool]) {
        let n = self.state.nodes.len();
        let coordinator: BTreeMap<usize, usize> = self
            .state
            .clusters
            .iter()
            .flat_map(|c| c.members.iter().map(move |&m| (m, c.coordinator)))
            .collect();
        let lease = self.cfg.coalition.ttl;
        let d = self.state.spec.feature_dim as u64;
        for i in 0..n {
            let pending = std::mem::take(&mut self.state.pending_offload[i]);
            if pending.is_empty() || !awake[i] {
                continue;
            }
            let Some(&h) = coordinator.get(&i) else { continue };
            let Some(ev) = live.get(&(i, h)) else { continue };
            if h == i || !awake[h] {
                continue;
            }
            let host = &self.state.nodes[h];
            let free = host
                .capacity
                .memory_bytes
                .saturating_sub(host.resident_bytes() + self.state.offload.hosted_bytes(h));
            let fits = pending.len().min((free / (8 * (d + 1))) as usize);
            if fits == 0 {
                self.log(Event::new(t, "offload-refused").node(i).peer(h));
                continue;
            }
            let bytes = fits as u64 * 8 * (d + 1);
            let mut r = rng::stream(self.cfg.seed, Subsystem::Link, i as u64, (t << 20) | (1 << 19) | h as u64);
            let (ri, rh) = (self.resolved.nodes[i].radio.clone(), self.resolved.nodes[h].radio.clone());
            let (s, dn) = network::pair_mut(&mut self.state.nodes, i, h);
            let tx = network::transmit(&bytes, ev, &ri, &rh, &mut s.energy, &mut dn.energy, &mut r);
            self.record_tx(t, i, h, &tx);
            if tx.delivered() {
                let out = self.state.offload.offload_replay(i, h, pending, free, t, lease);
                self.log(
                    Event::new(t, "offload")
                        .node(i)
                        .peer(h)
                        .detail(format!("{} accepted, {} rejected", out.accepted, out.rejected)),
                );
            }
        }
    }

    fn federated_round(&mut self, t: u64) -> Result<()> {
        let Some(server) = self.state.server.clone() else {
            return Ok(());
        };
        if let Some(h) = server.hub {
            if !self.state.nodes[h].alive {
                if !server.lost {
                    self.state.server = Some(ServerState { lost: true, ..server });
                    self.log(Event::new(t, "server-lost").node(h));
                }
                return Ok(());
            }
        }
        let n = self.state.nodes.len();
        let bytes = byte_size_for(self.state.nodes.first().map_or(0, |s| s.params.num_params()));
        let radios: Vec<_> = self.resolved.nodes.iter().map(|s| s.radio.clone()).collect();

        // uploads
        let mut uploaded = Vec::new();
        for i in 0..n {
            if !self.state.nodes[i].alive {
                continue;
            }
            if Some(i) != server.hub {
                let cost = bytes as f64 * radios[i].tx_energy;
                if !self.state.nodes[i].energy.can_afford(cost) {
                    self.log(Event::new(t, "send-skipped").node(i).detail("upload"));
                    continue;
                }
                self.state.nodes[i].energy.debit(EnergyKind::Tx, cost);
                self.state.bytes_tx[i] += bytes;
                if let Some(h) = server.hub {
                    let rx = bytes as f64 * radios[h].rx_energy;
                    if !self.state.nodes[h].energy.can_afford(rx) {
                        self.log(Event::new(t, "receiver-depleted").node(i).peer(h));
                        continue;
                    }
                    self.state.nodes[h].energy.debit(EnergyKind::Rx, rx);
                    self.state.bytes_rx[h] += bytes;
                }
            }
            uploaded.push(i);
        }
        let total: u64 = uploaded.iter().map(|&i| self.state.round_samples[i]).sum();
        if total == 0 {
            return Ok(());
        }
        let len = self.state.nodes[uploaded[0]].params.num_params();
        let mut avg = vec![0.0; len];
        for &i in &uploaded {
            let w = self.state.round_samples[i] as f64 / total as f64;
            if w == 0.0 {
                continue;
            }
            for (a, v) in avg.iter_mut().zip(self.state.nodes[i].params.to_flat()) {
                *a += w * v;
            }
        }

        // broadcast
        for i in 0..n {
            if !self.state.nodes[i].alive {
                continue;
            }
            if let Some(h) = server.hub {
                if h != i {
                    let cost = bytes as f64 * radios[h].tx_energy;
                    if !self.state.nodes[h].energy.can_afford(cost) {
                        self.log(Event::new(t, "send-skipped").node(h).peer(i).detail("broadcast"));
                        continue;
                    }
                    self.state.nodes[h].energy.debit(EnergyKind::Tx, cost);
                    self.state.bytes_tx[h] += bytes;
                }
            }
            if Some(i) != server.hub {
                let cost = bytes as f64 * radios[i].rx_energy;
                if !self.state.nodes[i].energy.can_afford(cost) {
                    self.log(Event::new(t, "receiver-depleted").node(i).detail("broadcast"));
                    continue;
                }
                self.state.nodes[i].energy.debit(EnergyKind::Rx, cost);
                self.state.bytes_rx[i] += bytes;
            }
            let node = &mut self.state.nodes[i];
            node.params.set_flat(&avg)?;
            node.params.version += 1;
        }
        Ok(())
    }

    fn emit_metrics(&mut self, t: u64) -> Result<()> {
        let n = self.state.nodes.len();
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let node = &self.state.nodes[i];
            let accuracy = if node.alive {
                let test = self.cache.test_views[i].as_deref().unwrap_or(&self.cache.test);
                Some(model::evaluate_accuracy(&node.params, test)?)
            } else {
                None
            };
            let mut tags = Vec::new();
            if !node.alive {
                tags.push("dead");
            }
            if self.cfg.is_adversary(i) {
                tags.push("adversary");
            }
            if self.state.sleeping[i] {
                tags.push("asleep");
            }
            let l = &node.energy.ledger;
            rows.push(MetricRecord {
                tick: t,
                node: Some(i),
                alive: node.alive,
                accuracy,
                energy_j: l.consumed(),
                energy_step_j: l.step,
                energy_tx_j: l.tx,
                energy_rx_j: l.rx,
                energy_harvest_j: l.harvest,
                energy_level_j: node.energy.level(),
                bytes_tx: self.state.bytes_tx[i],
                bytes_rx: self.state.bytes_rx[i],
                updates: node.updates,
                skipped: node.skipped,
                tags: tags.join(";"),
            });
        }
        let mut pop = MetricRecord::population(t, &rows);
        let honest: Vec<f64> = rows
            .iter()
            .filter(|r| !self.cfg.is_adversary(r.node.unwrap_or(usize::MAX)))
            .filter_map(|r| r.accuracy)
            .collect();
        pop.accuracy = (!honest.is_empty()).then(|| honest.iter().sum::<f64>() / honest.len() as f64);
        pop.tags = if self.state.drift_ticks.contains(&t) {
            "drift".into()
        } else {
            String::new()
        };
        self.state.records.extend(rows);
        self.state.records.push(pop);
        Ok(())
    }
}

/// One tick as a state transition; rebuilds caches each call, so prefer
/// [`Engine::step`] in loops.
pub fn tick(state: SimState, cfg: &ScenarioConfig) -> Result<SimState> {
    let mut e = Engine::restore(
        cfg.clone(),
        Checkpoint {
            format_version: CHECKPOINT_FORMAT,
            node_count: state.nodes.len(),
            state,
        },
    )?;
    e.step()?;
    Ok(e.into_state())
}

pub fn run_scenario(cfg: ScenarioConfig) -> Result<Engine> {
    let mut e = Engine::new(cfg)?;
    e.run()?;
    Ok(e)
}

/// Run a config whose regime is federated.
pub fn run_federated_regime(cfg: ScenarioConfig) -> Result<Engine> {
    if cfg.regime != Regime::Federated {
        return Err(Error::usage("config regime is not federated"));
    }
    run_scenario(cfg)
}

/// Run a config whose regime is gossip.
pub fn run_gossip_regime(cfg: ScenarioConfig) -> Result<Engine> {
    if cfg.regime != Regime::Gossip {
        return Err(Error::usage("config regime is not gossip"));
    }
    run_scenario(cfg)
}

/// Same scenario with exchange switched off; the reference for CE.
pub fn isolated_baseline(cfg: &ScenarioConfig) -> ScenarioConfig {
    ScenarioConfig {
        regime: Regime::Isolated,
        ..cfg.clone()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub name: String,
    pub seed: u64,
    pub seed_overridden: bool,
    pub node_count: usize,
    pub ticks: u64,
    pub ticks_run: u64,
    pub regime: Regime,
    pub completed: bool,
    pub initial_energy: Vec<f64>,
    pub drift_ticks: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_path: Option<PathBuf>,
    pub files: Vec<String>,
    pub generator: String,
}

/// Where a run came from, for the manifest.
#[derive(Debug, Clone, Default)]
pub struct Provenance {
    pub config_path: Option<PathBuf>,
    pub seed_overridden: bool,
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Write `metrics.csv`, `events.jsonl`, `packets.jsonl`, `trust.csv`,
/// `config-echo.json` and `manifest.json` into `dir`.
pub fn write_outputs(dir: &Path, engine: &Engine, prov: &Provenance) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let st = engine.state();
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    write("metrics.csv", metrics::metrics_csv_string(&st.records).as_bytes())?;
    let mut ev = Vec::new();
    for e in &st.events {
        serde_json::to_writer(&mut ev, e)?;
        ev.push(b'\n');
    }
    write("events.jsonl", &ev)?;
    let mut pk = Vec::new();
    for p in &st.packets {
        serde_json::to_writer(&mut pk, p)?;
        pk.push(b'\n');
    }
    write("packets.jsonl", &pk)?;
    let mut trust = String::from("tick,i,j,trust\n");
    let last = st.tick.saturating_sub(1);
    for (i, j, v) in st.trust.snapshot() {
        trust.push_str(&format!("{last},{i},{j},{v}\n"));
    }
    write("trust.csv", trust.as_bytes())?;
    let mut echo = serde_json::to_vec_pretty(engine.config())?;
    echo.push(b'\n');
    write("config-echo.json", &echo)?;
    let cfg = engine.config();
    let manifest = Manifest {
        format_version: OUTPUT_FORMAT,
        name: cfg.name.clone(),
        seed: cfg.seed,
        seed_overridden: prov.seed_overridden,
        node_count: cfg.node_count,
        ticks: cfg.ticks,
        ticks_run: st.tick,
        regime: cfg.regime,
        completed: engine.is_done(),
        initial_energy: st.initial_energy.clone(),
        drift_ticks: st.drift_ticks.clone(),
        output_dir: absolute(dir),
        config_path: prov.config_path.as_deref().map(absolute),
        files: ["metrics.csv", "events.jsonl", "packets.jsonl", "trust.csv", "config-echo.json", "manifest.json"]
            .map(String::from)
            .to_vec(),
        generator: format!("nodelearn {}", env!("CARGO_PKG_VERSION")),
    };
    let p = dir.join("manifest.json");
    let mut f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n").map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}

/// Read a finished run directory back into a trace.
pub fn read_run(dir: &Path) -> Result<RunTrace> {
    let records = metrics::read_metrics_csv(&dir.join("metrics.csv"))?;
    let p = dir.join("manifest.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    Ok(RunTrace {
        records,
        initial_energy: m.initial_energy,
        drift_ticks: m.drift_ticks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataConfig, Generator, Partition};
    use crate::network::MobilityModel;

    fn small(regime: Regime) -> ScenarioConfig {
        ScenarioConfig {
            node_count: 4,
            ticks: 20,
            regime,
            mobility: MobilityModel::StaticGrid { spacing: 10.0 },
            data: DataConfig {
                class_count: 3,
                feature_dim: 4,
                generator: Generator::OneHot {
                    separation: Some(3.0),
                    bayes_accuracy: None,
                    sigma: 1.0,
                },
                partition: Partition::Dirichlet { alpha: 0.5 },
                test_size: 100,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_nodes_is_identity() {
        let mut e = Engine::new(ScenarioConfig {
            node_count: 0,
            ..small(Regime::NodeLearning)
        })
        .unwrap();
        e.run().unwrap();
        assert!(e.state().nodes.is_empty());
        assert!(e.trace().records.iter().all(|r| r.node.is_none() && r.accuracy.is_none()));
    }

    #[test]
    fn isolated_moves_no_bytes() {
        let e = run_scenario(small(Regime::Isolated)).unwrap();
        let last = e.trace().final_population().cloned().unwrap();
        assert_eq!(last.bytes_tx, 0);
        assert_eq!(last.updates, 4 * 20);
    }

    #[test]
    fn node_learning_exchanges_and_audits() {
        let e = run_scenario(small(Regime::NodeLearning)).unwrap();
        let tr = e.trace();
        assert!(tr.final_population().unwrap().bytes_tx > 0);
        network::energy_ledger_check(&tr).unwrap();
        metrics::check_monotone(&tr.records).unwrap();
    }

    #[test]
    fn checkpoint_refuses_other_population() {
        let e = Engine::new(small(Regime::Isolated)).unwrap();
        let cp = e.checkpoint();
        let cfg = ScenarioConfig {
            node_count: 5,
            ..small(Regime::Isolated)
        };
        assert!(matches!(Engine::restore(cfg, cp), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn checkpoint_refuses_other_format() {
        let e = Engine::new(small(Regime::Isolated)).unwrap();
        let mut cp = e.checkpoint();
        cp.format_version = 99;
        assert!(matches!(Engine::restore(small(Regime::Isolated), cp), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn fresh_checkpoint_restores_to_tick_zero() {
        let e = Engine::new(small(Regime::Isolated)).unwrap();
        let r = Engine::restore(small(Regime::Isolated), e.checkpoint()).unwrap();
        assert_eq!(r.state().tick, 0);
        assert_eq!(r.state(), e.state());
    }

    #[test]
    fn tick_function_matches_engine_step() {
        let cfg = small(Regime::NodeLearning);
        let mut e = Engine::new(cfg.clone()).unwrap();
        let s0 = e.state().clone();
        e.step().unwrap();
        assert_eq!(&tick(s0, &cfg).unwrap(), e.state());
    }

    #[test]
    fn hub_is_most_connected_lowest_id() {
        let contacts = vec![
            ContactEvent { time: 0, from: 2, to: 0, distance: 1.0, loss_prob: 0.0, max_bytes: 1 },
            ContactEvent { time: 0, from: 2, to: 1, distance: 1.0, loss_prob: 0.0, max_bytes: 1 },
            ContactEvent { time: 0, from: 1, to: 0, distance: 1.0, loss_prob: 0.0, max_bytes: 1 },
            ContactEvent { time: 0, from: 1, to: 2, distance: 1.0, loss_prob: 0.0, max_bytes: 1 },
        ];
        assert_eq!(hub_from_contacts(&contacts, 3), Some(1));
    }
}
