//! Transferable knowledge and the merge operators that integrate it.
//!
//! A node packages part of its state as a [`KnowledgePacket`]; receivers
//! combine accepted packets with their own parameters under a
//! [`MergePolicy`]. Packets that do not fit (wrong shape, wrong probe set)
//! are rejected individually and the merge goes ahead with the rest.

use serde::{Deserialize, Serialize};

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::linalg::{argmax, softmax, Matrix};
use crate::model::{self, ModelMode};
use crate::network::HasByteSize;
use crate::node::NodeState;

pub const HEADER_BYTES: u64 = 32;
pub const BYTES_PER_REAL: u64 = 8;

/// Canonical size model: 8 bytes per real plus a fixed header.
pub fn byte_size_for(reals: usize) -> u64 {
    BYTES_PER_REAL * reals as u64 + HEADER_BYTES
}

/// Shared labelled reference batch, identified by a content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub samples: Vec<Sample>,
    pub hash: u64,
}

impl ProbeSet {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::config("probe set must be nonempty"));
        }
        let hash = fnv1a(&samples);
        Ok(Self { samples, hash })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The same reference set seen through a node's feature mask. Keeps the
    /// hash of the shared set.
    pub fn masked(&self, mask: Option<&[bool]>) -> Self {
        let mut samples = self.samples.clone();
        for s in &mut samples {
            crate::datagen::apply_mask(&mut s.x, mask);
        }
        Self {
            samples,
            hash: self.hash,
        }
    }
}

fn fnv1a(samples: &[Sample]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: [u8; 8]| {
        for b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for s in samples {
        for v in &s.x {
            eat(v.to_bits().to_le_bytes());
        }
        eat((s.y as u64).to_le_bytes());
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PacketKind {
    FullParams,
    TrunkOnly,
    Prototypes,
    ProbeLogits,
    Confidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamShape {
    pub feature_dim: usize,
    pub hidden_dim: Option<usize>,
    pub class_count: usize,
}

impl ParamShape {
    pub fn of(p: &model::ModelParams) -> Self {
        Self {
            feature_dim: p.feature_dim(),
            hidden_dim: p.trunk.as_ref().map(|t| t.cols()),
            class_count: p.class_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    /// Flat parameters in trunk, head, bias order.
    Params(Vec<f64>),
    Trunk(Vec<f64>),
    /// `(class, mean feature vector)` pairs.
    Prototypes(Vec<(usize, Vec<f64>)>),
    /// Row-major `probe size × class count` logits.
    ProbeLogits { probe_hash: u64, logits: Vec<f64> },
    Confidence(Vec<f64>),
}

impl Payload {
    pub fn reals(&self) -> usize {
        match self {
            Payload::Params(v) | Payload::Trunk(v) | Payload::Confidence(v) => v.len(),
            Payload::Prototypes(p) => p.iter().map(|(_, v)| v.len() + 1).sum(),
            Payload::ProbeLogits { logits, .. } => logits.len(),
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Payload::Params(v) | Payload::Trunk(v) | Payload::Confidence(v) => {
                v.iter().all(|x| x.is_finite())
            }
            Payload::Prototypes(p) => p.iter().all(|(_, v)| v.iter().all(|x| x.is_finite())),
            Payload::ProbeLogits { logits, .. } => logits.iter().all(|x| x.is_finite()),
        }
    }
}

/// Compact copy of the sender's context carried in every packet header.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ContextSummary {
    pub energy_fraction: f64,
    pub connectivity_quality: f64,
    pub salience: f64,
    /// In-contact neighbour count of the sender this tick.
    pub degree: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgePacket {
    pub kind: PacketKind,
    pub payload: Payload,
    pub shape: ParamShape,
    pub source: usize,
    pub source_version: u64,
    pub byte_size: u64,
    pub context: ContextSummary,
}

impl HasByteSize for KnowledgePacket {
    fn byte_size(&self) -> u64 {
        self.byte_size
    }
}

impl KnowledgePacket {
    pub fn new(
        kind: PacketKind,
        payload: Payload,
        shape: ParamShape,
        source: usize,
        source_version: u64,
        context: ContextSummary,
    ) -> Self {
        let byte_size = byte_size_for(payload.reals());
        Self {
            kind,
            payload,
            shape,
            source,
            source_version,
            byte_size,
            context,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.byte_size == byte_size_for(self.payload.reals()) && self.payload.is_finite()
    }
}

/// One delivered packet in the exchange trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub tick: u64,
    pub receiver: usize,
    pub kind: PacketKind,
    pub source: usize,
    pub version: u64,
    pub byte_size: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Payload>,
}

impl PacketRecord {
    pub fn new(tick: u64, receiver: usize, p: &KnowledgePacket, with_payload: bool) -> Self {
        Self {
            tick,
            receiver,
            kind: p.kind,
            source: p.source,
            version: p.source_version,
            byte_size: p.byte_size,
            payload: with_payload.then(|| p.payload.clone()),
        }
    }
}

fn summary(node: &NodeState, degree: usize) -> ContextSummary {
    ContextSummary {
        energy_fraction: node.context.energy_fraction,
        connectivity_quality: node.context.connectivity_quality,
        salience: node.context.salience,
        degree,
    }
}

fn probe_logits(p: &model::ModelParams, probe: &ProbeSet) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(probe.len() * p.class_count());
    for s in &probe.samples {
        out.extend(p.predict_logits(&s.x)?);
    }
    Ok(out)
}

/// Package part of `node`'s state. `probe` must already be seen through the
/// node's feature mask. `degree` is the sender's neighbour count this tick.
pub fn encode_packet(node: &NodeState, kind: PacketKind, probe: &ProbeSet, degree: usize) -> Result<KnowledgePacket> {
    let p = &node.params;
    let payload = match kind {
        PacketKind::FullParams => Payload::Params(p.to_flat()),
        PacketKind::TrunkOnly => match &p.trunk {
            Some(t) => Payload::Trunk(t.as_slice().to_vec()),
            None => {
                return Err(Error::config("trunk-only packets need one-hidden-layer mode"));
            }
        },
        PacketKind::Prototypes => {
            let d = p.feature_dim();
            let k = p.class_count();
            let mut sums = vec![vec![0.0; d]; k];
            let mut counts = vec![0usize; k];
            for s in node.replay.real() {
                counts[s.y] += 1;
                for (a, b) in sums[s.y].iter_mut().zip(&s.x) {
                    *a += b;
                }
            }
            let protos: Vec<(usize, Vec<f64>)> = sums
                .into_iter()
                .zip(&counts)
                .enumerate()
                .filter(|(_, (_, &n))| n > 0)
                .map(|(c, (v, &n))| (c, v.into_iter().map(|a| a / n as f64).collect()))
                .collect();
            if protos.is_empty() {
                return Err(Error::usage("prototypes unavailable: replay buffer holds no real samples"));
            }
            Payload::Prototypes(protos)
        }
        PacketKind::ProbeLogits => Payload::ProbeLogits {
            probe_hash: probe.hash,
            logits: probe_logits(p, probe)?,
        },
        PacketKind::Confidence => {
            let k = p.class_count();
            let mut sum = vec![0.0; k];
            let mut n = vec![0usize; k];
            for s in &probe.samples {
                let pr = model::predict_proba(p, &s.x)?;
                let c = argmax(&pr);
                sum[c] += pr[c];
                n[c] += 1;
            }
            Payload::Confidence(
                sum.iter()
                    .zip(&n)
                    .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
                    .collect(),
            )
        }
    };
    Ok(KnowledgePacket::new(
        kind,
        payload,
        ParamShape::of(p),
        node.id,
        p.version,
        summary(node, degree),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MergeKind {
    #[default]
    Average,
    Distill,
    Trunk,
    Prototype,
    None,
}

impl MergeKind {
    pub fn packet_kind(self) -> Option<PacketKind> {
        match self {
            MergeKind::Average => Some(PacketKind::FullParams),
            MergeKind::Distill => Some(PacketKind::ProbeLogits),
            MergeKind::Trunk => Some(PacketKind::TrunkOnly),
            MergeKind::Prototype => Some(PacketKind::Prototypes),
            MergeKind::None => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightRule {
    Uniform,
    #[default]
    Metropolis,
    TrustContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergePolicy {
    pub kind: MergeKind,
    pub weights: WeightRule,
    pub distill_steps: usize,
    pub distill_rate: f64,
    /// Copies of a received prototype stored per unit of merge weight.
    pub prototype_replication: usize,
}

impl Default for MergePolicy {
    fn default() -> Self {
        Self {
            kind: MergeKind::Average,
            weights: WeightRule::Metropolis,
            distill_steps: 5,
            distill_rate: 0.5,
            prototype_replication: 4,
        }
    }
}

impl MergePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.kind == MergeKind::Distill && !(self.distill_rate > 0.0) {
            return Err(Error::config("distill rate must be positive"));
        }
        Ok(())
    }
}

/// Self weight plus one weight per packet, in packet order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeWeights {
    pub self_weight: f64,
    pub peers: Vec<f64>,
    /// Trust-context found no trusted peer and fell back to self only.
    pub fallback: bool,
}

impl MergeWeights {
    pub fn identity(n: usize) -> Self {
        Self {
            self_weight: 1.0,
            peers: vec![0.0; n],
            fallback: false,
        }
    }

    pub fn sum(&self) -> f64 {
        self.self_weight + self.peers.iter().sum::<f64>()
    }
}

/// Weights for merging `packets` into the receiver.
///
/// * uniform: `1/(n+1)` each;
/// * metropolis: `1/(1 + max(deg_i, deg_j))` per peer, self takes the rest;
/// * trust-context: raw `trust(i,j) · connectivity_j`, self
///   `max(0.5, 1 − Σ raw)`, then renormalised.
///
/// `trust` maps a source id to the receiver's trust in it.
pub fn compute_weights(
    self_degree: usize,
    packets: &[&KnowledgePacket],
    rule: WeightRule,
    trust: impl Fn(usize) -> f64,
) -> MergeWeights {
    let n = packets.len();
    if n == 0 {
        return MergeWeights::identity(0);
    }
    match rule {
        WeightRule::Uniform => {
            let w = 1.0 / (n as f64 + 1.0);
            MergeWeights {
                self_weight: w,
                peers: vec![w; n],
                fallback: false,
            }
        }
        WeightRule::Metropolis => {
            let mut peers: Vec<f64> = packets
                .iter()
                .map(|p| 1.0 / (1.0 + self_degree.max(p.context.degree) as f64))
                .collect();
            let total: f64 = peers.iter().sum();
            if total > 1.0 {
                // inconsistent degree reports; keep the row stochastic
                peers.iter_mut().for_each(|w| *w /= total + 1.0 / (1.0 + self_degree as f64));
            }
            let self_weight = 1.0 - peers.iter().sum::<f64>();
            MergeWeights {
                self_weight,
                peers,
                fallback: false,
            }
        }
        WeightRule::TrustContext => {
            let raw: Vec<f64> = packets
                .iter()
                .map(|p| (trust(p.source).clamp(0.0, 1.0) * p.context.connectivity_quality.clamp(0.0, 1.0)).max(0.0))
                .collect();
            let s: f64 = raw.iter().sum();
            if s <= 0.0 {
                return MergeWeights {
                    fallback: true,
                    ..MergeWeights::identity(n)
                };
            }
            let self_raw = (1.0 - s).max(0.5);
            let total = self_raw + s;
            MergeWeights {
                self_weight: self_raw / total,
                peers: raw.iter().map(|w| w / total).collect(),
                fallback: false,
            }
        }
    }
}

/// What a merge did with its packets.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MergeReport {
    pub accepted: Vec<usize>,
    pub rejected: Vec<(usize, String)>,
    /// Sum of accepted packets' byte sizes.
    pub bytes: u64,
}

impl MergeReport {
    fn accept(&mut self, p: &KnowledgePacket) {
        self.accepted.push(p.source);
        self.bytes += p.byte_size;
    }

    fn reject(&mut self, p: &KnowledgePacket, why: impl Into<String>) {
        self.rejected.push((p.source, why.into()));
    }
}

/// Weighted combination `w_self·x + Σ w_j·y_j`, skipping exact-zero
/// weights so a unit self weight is bitwise the identity.
fn weighted_sum(own: &[f64], self_weight: f64, parts: &[(&[f64], f64)]) -> Vec<f64> {
    let mut out: Vec<f64> = if self_weight == 1.0 {
        own.to_vec()
    } else {
        own.iter().map(|v| self_weight * v).collect()
    };
    for (vals, w) in parts {
        if *w == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(vals.iter()) {
            *o += w * v;
        }
    }
    out
}

/// Reassign the weight of rejected packets to self.
fn renormalise(weights: &MergeWeights, keep: &[bool]) -> (f64, Vec<f64>) {
    let mut self_w = weights.self_weight;
    let peers = weights
        .peers
        .iter()
        .zip(keep)
        .map(|(&w, &k)| {
            if k {
                w
            } else {
                self_w += w;
                0.0
            }
        })
        .collect();
    (self_w, peers)
}

/// `θ ← w_self·θ + Σ w_j·θ_j` over full-parameter packets.
pub fn merge_average(node: &mut NodeState, packets: &[&KnowledgePacket], weights: &MergeWeights) -> MergeReport {
    let mut report = MergeReport::default();
    let shape = ParamShape::of(&node.params);
    let keep: Vec<bool> = packets
        .iter()
        .map(|p| {
            let ok = p.kind == PacketKind::FullParams
                && p.shape == shape
                && matches!(&p.payload, Payload::Params(v) if v.len() == node.params.num_params())
                && p.is_consistent();
            if ok {
                report.accept(p);
            } else {
                report.reject(p, "full-params shape mismatch");
            }
            ok
        })
        .collect();
    let (self_w, peers) = renormalise(weights, &keep);
    if report.accepted.is_empty() || self_w == 1.0 {
        return report;
    }
    let parts: Vec<(&[f64], f64)> = packets
        .iter()
        .zip(&peers)
        .filter_map(|(p, &w)| match &p.payload {
            Payload::Params(v) if w > 0.0 => Some((v.as_slice(), w)),
            _ => None,
        })
        .collect();
    let merged = weighted_sum(&node.params.to_flat(), self_w, &parts);
    node.params
        .set_flat(&merged)
        .expect("accepted packets match the node's shape");
    node.params.version += 1;
    report
}

/// Distil the weight-averaged peer softmax on the probe set into the node:
/// `distill_steps` gradient steps on KL(teacher ∥ student) at
/// `distill_rate`. `probe` must be the node's masked view of the shared set.
pub fn merge_distill(
    node: &mut NodeState,
    packets: &[&KnowledgePacket],
    weights: &MergeWeights,
    policy: &MergePolicy,
    probe: &ProbeSet,
) -> MergeReport {
    let mut report = MergeReport::default();
    let k = node.params.class_count();
    let expect_len = probe.len() * k;
    let keep: Vec<bool> = packets
        .iter()
        .map(|p| {
            let ok = matches!(&p.payload,
                Payload::ProbeLogits { probe_hash, logits }
                    if *probe_hash == probe.hash && logits.len() == expect_len)
                && p.is_consistent();
            if ok {
                report.accept(p);
            } else {
                report.reject(p, "probe mismatch");
            }
            ok
        })
        .collect();
    let (_, peers) = renormalise(weights, &keep);
    let total: f64 = peers.iter().sum();
    if report.accepted.is_empty() || total <= 0.0 {
        return report;
    }
    let mut teacher = vec![vec![0.0; k]; probe.len()];
    let mut pr = vec![0.0; k];
    for (p, &w) in packets.iter().zip(&peers) {
        let Payload::ProbeLogits { logits, .. } = &p.payload else {
            continue;
        };
        if w == 0.0 {
            continue;
        }
        for (row, t) in logits.chunks(k).zip(teacher.iter_mut()) {
            softmax(row, &mut pr);
            for (ti, pi) in t.iter_mut().zip(&pr) {
                *ti += w / total * pi;
            }
        }
    }
    let inputs: Vec<&[f64]> = probe.samples.iter().map(|s| s.x.as_slice()).collect();
    for _ in 0..policy.distill_steps {
        let g = model::soft_target_grad(
            &node.params,
            inputs.iter().copied().zip(teacher.iter().cloned()),
            inputs.len(),
        );
        model::apply_gradient(&mut node.params, &g, policy.distill_rate);
    }
    node.params.version += 1;
    report
}

/// Average only the trunk; the head stays private.
pub fn merge_trunk(node: &mut NodeState, packets: &[&KnowledgePacket], weights: &MergeWeights) -> Result<MergeReport> {
    let Some(trunk) = &node.params.trunk else {
        return Err(Error::config("trunk merge needs one-hidden-layer mode"));
    };
    let n = trunk.as_slice().len();
    let (rows, cols) = trunk.shape();
    let mut report = MergeReport::default();
    let keep: Vec<bool> = packets
        .iter()
        .map(|p| {
            let ok = p.kind == PacketKind::TrunkOnly
                && p.shape.feature_dim == rows
                && p.shape.hidden_dim == Some(cols)
                && matches!(&p.payload, Payload::Trunk(v) if v.len() == n)
                && p.is_consistent();
            if ok {
                report.accept(p);
            } else {
                report.reject(p, "trunk shape mismatch");
            }
            ok
        })
        .collect();
    let (self_w, peers) = renormalise(weights, &keep);
    if report.accepted.is_empty() || self_w == 1.0 {
        return Ok(report);
    }
    let parts: Vec<(&[f64], f64)> = packets
        .iter()
        .zip(&peers)
        .filter_map(|(p, &w)| match &p.payload {
            Payload::Trunk(v) if w > 0.0 => Some((v.as_slice(), w)),
            _ => None,
        })
        .collect();
    let merged = weighted_sum(trunk.as_slice(), self_w, &parts);
    node.params.trunk = Some(Matrix::from_vec(rows, cols, merged));
    node.params.version += 1;
    Ok(report)
}

/// Store received prototypes as synthetic replay samples, replicated
/// `max(1, round(w_j · prototype_replication))` times. Parameters are not
/// modified here; later local steps consume the samples.
pub fn merge_prototype(
    node: &mut NodeState,
    packets: &[&KnowledgePacket],
    weights: &MergeWeights,
    policy: &MergePolicy,
) -> MergeReport {
    let mut report = MergeReport::default();
    let d = node.params.feature_dim();
    let k = node.params.class_count();
    for (p, &w) in packets.iter().zip(&weights.peers) {
        let Payload::Prototypes(protos) = &p.payload else {
            report.reject(p, "not a prototype packet");
            continue;
        };
        if protos.iter().any(|(c, v)| v.len() != d || *c >= k) || !p.is_consistent() {
            report.reject(p, "prototype dimension mismatch");
            continue;
        }
        report.accept(p);
        if w <= 0.0 {
            continue;
        }
        let copies = ((w * policy.prototype_replication as f64).round() as usize).max(1);
        for (c, v) in protos {
            for _ in 0..copies {
                node.replay.push(Sample { x: v.clone(), y: *c }, true);
            }
        }
    }
    report
}

/// Cluster-level knowledge: the uniform mean of members' probe logits, at
/// the size of a single node's packet.
pub fn cluster_summary(members: &[&NodeState], probes: &[&ProbeSet]) -> Result<KnowledgePacket> {
    let (first, first_probe) = match (members.first(), probes.first()) {
        (Some(m), Some(p)) => (m, p),
        _ => return Err(Error::usage("cluster summary needs at least one member")),
    };
    if probes.len() != members.len() {
        return Err(Error::usage("one probe view per member required"));
    }
    let mut acc = probe_logits(&first.params, first_probe)?;
    for (m, probe) in members.iter().zip(probes).skip(1) {
        if probe.hash != first_probe.hash {
            return Err(Error::usage("members hold different probe sets"));
        }
        let l = probe_logits(&m.params, probe)?;
        if l.len() != acc.len() {
            return Err(Error::Shape {
                expected: acc.len(),
                got: l.len(),
            });
        }
        for (a, b) in acc.iter_mut().zip(&l) {
            *a += b;
        }
    }
    if members.len() > 1 {
        let n = members.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
    }
    let version = members.iter().map(|m| m.params.version).max().unwrap_or(0);
    Ok(KnowledgePacket::new(
        PacketKind::ProbeLogits,
        Payload::ProbeLogits {
            probe_hash: first_probe.hash,
            logits: acc,
        },
        ParamShape::of(&first.params),
        first.id,
        version,
        summary(first, members.len() - 1),
    ))
}

/// True if the node's mode supports sending `kind`.
pub fn kind_supported(mode: ModelMode, kind: PacketKind) -> bool {
    kind != PacketKind::TrunkOnly || mode == ModelMode::OneHiddenLayer
}
