//! Declarative scenario description: population, data, mobility, exchange
//! policy, metrics and seeds. One validation path serves `validate` and
//! `run` alike.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{self, CsvSchema, DataStreamSpec, DriftEvent, FeatureSource};
use crate::error::{Error, Issue, Result};
use crate::exchange::{MergeKind, MergePolicy};
use crate::model::{ModelMode, TrainingConfig};
use crate::network::mobility::{load_contact_trace, TraceRow};
use crate::network::{MobilityModel, RadioProfile};
use crate::resources::CapacityProfile;
use crate::rng::{self, Subsystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// No exchange at all.
    Isolated,
    /// Synchronous server rounds with sample-weighted averaging.
    Federated,
    /// Local steps then neighbour averaging over a static topology.
    Gossip,
    #[default]
    NodeLearning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Generator {
    /// Class `c` centred at `separation · e_c`. Give either `separation` or
    /// the Bayes accuracy to solve for.
    OneHot {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        separation: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bayes_accuracy: Option<f64>,
        #[serde(default = "one")]
        sigma: f64,
    },
    /// Seeded random class means at the given norm.
    Random {
        separation: f64,
        #[serde(default = "one")]
        sigma: f64,
    },
    /// Pre-featurised table; `class_count` and `feature_dim` are inferred.
    Csv {
        path: PathBuf,
        features: Vec<String>,
        label: String,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Partition {
    /// Every node draws labels uniformly.
    Iid,
    Dirichlet { alpha: f64 },
    Explicit { priors: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub class_count: usize,
    pub feature_dim: usize,
    pub generator: Generator,
    pub partition: Partition,
    /// Each event takes effect from its `tick` onward.
    pub drift: Vec<DriftEvent>,
    pub test_size: usize,
    pub validation_size: usize,
    pub probe_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            class_count: 4,
            feature_dim: 8,
            generator: Generator::OneHot {
                separation: None,
                bayes_accuracy: Some(0.9),
                sigma: 1.0,
            },
            partition: Partition::Dirichlet { alpha: 1.0 },
            drift: Vec::new(),
            test_size: 500,
            validation_size: 50,
            probe_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NodeTemplate {
    pub capacity: CapacityProfile,
    /// Built-in profile name (`ble`, `lora`, `wifi`) or a key of `radios`.
    pub radio: String,
    /// Observed feature indices; every feature when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observed: Option<Vec<usize>>,
    /// Overrides `training.mode` for nodes of this template.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModelMode>,
}

impl Default for NodeTemplate {
    fn default() -> Self {
        Self {
            capacity: CapacityProfile::default(),
            radio: "wifi".into(),
            observed: None,
            mode: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeGroup {
    pub template: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExchangeConfig {
    /// Per-receiver byte budget per exchange; unlimited when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget_bytes: Option<u64>,
    /// Exchange every `every` ticks.
    pub every: u64,
    /// Let cluster coordinators forward packets between members out of
    /// direct range.
    pub relays: bool,
    /// Park evicted replay entries on the cluster coordinator.
    pub offload: bool,
}

impl Default for ExchangeConfig {
    fn default() -> Self {
        Self {
            budget_bytes: None,
            every: 1,
            relays: false,
            offload: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoalitionConfig {
    pub ttl: u64,
    pub trust_decay: f64,
    pub stranger_trust: f64,
    pub utility_scale: f64,
    pub rotation: bool,
    pub sleep_threshold: f64,
}

impl Default for CoalitionConfig {
    fn default() -> Self {
        Self {
            ttl: 10,
            trust_decay: crate::coalition::DEFAULT_TRUST_DECAY,
            stranger_trust: crate::coalition::DEFAULT_STRANGER_TRUST,
            utility_scale: crate::coalition::DEFAULT_UTILITY_SCALE,
            rotation: true,
            sleep_threshold: crate::resources::DEFAULT_SLEEP_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ServerKind {
    /// Lossless, always reachable, not a node.
    #[default]
    Virtual,
    /// Hosted on the best-connected node at tick 0; rounds stop if it dies.
    Proxy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederatedConfig {
    pub local_steps: usize,
    pub server: ServerKind,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        Self {
            local_steps: 1,
            server: ServerKind::Virtual,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Emit rows every `cadence` ticks and at the last tick.
    pub cadence: u64,
    pub al_epsilon: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            cadence: 1,
            al_epsilon: crate::metrics::DEFAULT_AL_EPSILON,
        }
    }
}

/// Nodes marked dead from the start of `tick`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutEvent {
    pub tick: u64,
    pub nodes: Vec<usize>,
}

/// A node that sends the same garbage full-params packet every exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarySpec {
    pub node: usize,
    #[serde(default = "default_garbage_scale")]
    pub scale: f64,
}

fn default_garbage_scale() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub node_count: usize,
    pub ticks: u64,
    pub tick_seconds: f64,
    pub regime: Regime,
    pub data: DataConfig,
    pub training: TrainingConfig,
    /// Scale steps by the context gate; plain SGD when off.
    pub gating: bool,
    pub context_decay: f64,
    pub replay_capacity: usize,
    /// Start every node from the same initial parameters.
    pub shared_init: bool,
    pub policy: MergePolicy,
    pub exchange: ExchangeConfig,
    pub coalition: CoalitionConfig,
    pub federated: FederatedConfig,
    pub mobility: MobilityModel,
    pub radios: BTreeMap<String, RadioProfile>,
    pub templates: BTreeMap<String, NodeTemplate>,
    /// Template assignment in node-id order. Empty means every node uses
    /// the `default` template.
    pub groups: Vec<NodeGroup>,
    pub metrics: MetricsConfig,
    pub dropout: Vec<DropoutEvent>,
    pub adversaries: Vec<AdversarySpec>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            seed: 0,
            node_count: 10,
            ticks: 100,
            tick_seconds: 1.0,
            regime: Regime::NodeLearning,
            data: DataConfig::default(),
            training: TrainingConfig::default(),
            gating: true,
            context_decay: crate::context::DEFAULT_DECAY,
            replay_capacity: 64,
            shared_init: false,
            policy: MergePolicy::default(),
            exchange: ExchangeConfig::default(),
            coalition: CoalitionConfig::default(),
            federated: FederatedConfig::default(),
            mobility: MobilityModel::StaticGrid { spacing: 10.0 },
            radios: BTreeMap::new(),
            templates: BTreeMap::new(),
            groups: Vec::new(),
            metrics: MetricsConfig::default(),
            dropout: Vec::new(),
            adversaries: Vec::new(),
        }
    }
}

pub const DEFAULT_TEMPLATE: &str = "default";

/// Per-node view after template resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSetup {
    pub template: String,
    pub capacity: CapacityProfile,
    pub radio: RadioProfile,
    pub mask: Option<Vec<bool>>,
    pub training: TrainingConfig,
}

/// Everything the engine needs beyond the raw config.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub nodes: Vec<NodeSetup>,
    pub spec: DataStreamSpec,
    pub trace: Vec<TraceRow>,
}

/// Parsed config plus the unknown keys met in lax mode.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ScenarioConfig,
    pub warnings: Vec<Issue>,
}

fn json_path(p: &str) -> String {
    if p.is_empty() || p == "?" {
        "$".into()
    } else {
        format!("$.{p}")
    }
}

/// Parse and validate. Unknown keys are errors when `strict`, warnings
/// otherwise. Relative paths inside the config resolve against `base`.
pub fn parse_config(text: &str, strict: bool, base: Option<&Path>) -> Result<Loaded> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Invalid {
        issues: vec![Issue {
            path: "$".into(),
            message: format!("not valid JSON: {e}"),
        }],
    })?;
    let mut unknown = Vec::new();
    let mut track = serde_path_to_error::Track::new();
    let de = serde_path_to_error::Deserializer::new(value, &mut track);
    let parsed: std::result::Result<ScenarioConfig, _> =
        serde_ignored::deserialize(de, |p| unknown.push(json_path(&p.to_string())));
    let mut config = parsed.map_err(|e| Error::Invalid {
        issues: vec![Issue {
            path: json_path(&track.path().to_string()),
            message: e.to_string(),
        }],
    })?;
    let unknown: Vec<Issue> = unknown
        .into_iter()
        .map(|path| Issue {
            path,
            message: "unknown key".into(),
        })
        .collect();
    if let Some(b) = base {
        config.rebase_paths(b);
    }
    let mut issues = validate(&config);
    let warnings = if strict {
        issues.splice(0..0, unknown);
        Vec::new()
    } else {
        unknown
    };
    if issues.is_empty() {
        Ok(Loaded { config, warnings })
    } else {
        Err(Error::Invalid { issues })
    }
}

pub fn load_config(path: &Path, strict: bool) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, strict, path.parent())
}

fn issue(path: impl Into<String>, message: impl Into<String>) -> Issue {
    Issue {
        path: path.into(),
        message: message.into(),
    }
}

/// Schema-level and cross-field checks. Empty means valid.
pub fn validate(cfg: &ScenarioConfig) -> Vec<Issue> {
    let mut out = Vec::new();
    if !(cfg.tick_seconds > 0.0 && cfg.tick_seconds.is_finite()) {
        out.push(issue("$.tick_seconds", "must be positive"));
    }
    if let Err(e) = cfg.training.validate() {
        out.push(issue("$.training", e.to_string()));
    }
    if let Err(e) = cfg.policy.validate() {
        out.push(issue("$.policy", e.to_string()));
    }
    if !(cfg.context_decay >= 0.0 && cfg.context_decay < 1.0) {
        out.push(issue("$.context_decay", "must lie in [0, 1)"));
    }
    if cfg.metrics.cadence == 0 {
        out.push(issue("$.metrics.cadence", "must be at least 1"));
    }
    if !(cfg.metrics.al_epsilon > 0.0) {
        out.push(issue("$.metrics.al_epsilon", "must be positive"));
    }
    if cfg.exchange.every == 0 {
        out.push(issue("$.exchange.every", "must be at least 1"));
    }
    let c = &cfg.coalition;
    if !(0.0..1.0).contains(&c.trust_decay) {
        out.push(issue("$.coalition.trust_decay", "must lie in [0, 1)"));
    }
    if !(0.0..=1.0).contains(&c.stranger_trust) {
        out.push(issue("$.coalition.stranger_trust", "must lie in [0, 1]"));
    }
    if !(c.utility_scale > 0.0) {
        out.push(issue("$.coalition.utility_scale", "must be positive"));
    }
    if !(0.0..=1.0).contains(&c.sleep_threshold) {
        out.push(issue("$.coalition.sleep_threshold", "must lie in [0, 1]"));
    }
    if cfg.data.test_size == 0 {
        out.push(issue("$.data.test_size", "must be at least 1"));
    }
    if cfg.data.validation_size == 0 {
        out.push(issue("$.data.validation_size", "must be at least 1"));
    }
    if cfg.data.probe_size == 0 {
        out.push(issue("$.data.probe_size", "must be at least 1"));
    }

    match cfg.regime {
        Regime::Federated if cfg.policy.kind != MergeKind::Average => out.push(issue(
            "$.regime",
            format!(
                "regime federated requires $.policy.kind = average, found {}",
                kebab(&cfg.policy.kind)
            ),
        )),
        Regime::Gossip => {
            if cfg.policy.kind != MergeKind::Average {
                out.push(issue(
                    "$.regime",
                    format!("regime gossip requires $.policy.kind = average, found {}", kebab(&cfg.policy.kind)),
                ));
            }
            if !cfg.mobility.is_static() {
                out.push(issue("$.mobility", "regime gossip requires a static mobility model"));
            }
        }
        _ => {}
    }

    for (name, r) in &cfg.radios {
        if let Err(e) = r.validate() {
            out.push(issue(format!("$.radios.{name}"), e.to_string()));
        }
    }
    for (name, t) in &cfg.templates {
        if let Err(e) = t.capacity.validate() {
            out.push(issue(format!("$.templates.{name}.capacity"), e.to_string()));
        }
        if !cfg.radios.contains_key(&t.radio) && RadioProfile::builtin(&t.radio).is_none() {
            out.push(issue(format!("$.templates.{name}.radio"), format!("unknown radio profile {:?}", t.radio)));
        }
    }
    if !cfg.templates.contains_key(DEFAULT_TEMPLATE) {
        let t = NodeTemplate::default();
        if !cfg.radios.contains_key(&t.radio) && RadioProfile::builtin(&t.radio).is_none() {
            out.push(issue("$.templates", "default radio missing"));
        }
    }
    if !cfg.groups.is_empty() {
        for (i, g) in cfg.groups.iter().enumerate() {
            if g.template != DEFAULT_TEMPLATE && !cfg.templates.contains_key(&g.template) {
                out.push(issue(format!("$.groups[{i}].template"), format!("unknown template {:?}", g.template)));
            }
        }
        let total: usize = cfg.groups.iter().map(|g| g.count).sum();
        if total != cfg.node_count {
            out.push(issue(
                "$.groups",
                format!("group counts sum to {total} but node_count is {}", cfg.node_count),
            ));
        }
    }
    for (i, ev) in cfg.dropout.iter().enumerate() {
        for (k, &n) in ev.nodes.iter().enumerate() {
            if n >= cfg.node_count {
                out.push(issue(format!("$.dropout[{i}].nodes[{k}]"), format!("node {n} does not exist")));
            }
        }
    }
    for (i, a) in cfg.adversaries.iter().enumerate() {
        if a.node >= cfg.node_count {
            out.push(issue(format!("$.adversaries[{i}].node"), format!("node {} does not exist", a.node)));
        }
        if !(a.scale.is_finite()) {
            out.push(issue(format!("$.adversaries[{i}].scale"), "must be finite"));
        }
    }
    match &cfg.mobility {
        MobilityModel::StaticPositions { positions } if positions.len() != cfg.node_count => {
            out.push(issue(
                "$.mobility.positions",
                format!("{} positions for {} nodes", positions.len(), cfg.node_count),
            ));
        }
        MobilityModel::RandomWaypoint {
            arena,
            speed_min,
            speed_max,
        } => {
            if !(arena.0 > 0.0 && arena.1 > 0.0) {
                out.push(issue("$.mobility.arena", "must be positive"));
            }
            if !(*speed_min > 0.0 && speed_max >= speed_min) {
                out.push(issue("$.mobility", "need 0 < speed_min <= speed_max"));
            }
        }
        _ => {}
    }
    if out.is_empty() {
        // Deeper checks need the resolved population and data.
        if let Err(e) = resolve(cfg) {
            match e {
                Error::Invalid { issues } => out.extend(issues),
                other => out.push(issue("$", other.to_string())),
            }
        }
    }
    out
}

fn kebab<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

impl ScenarioConfig {
    fn rebase_paths(&mut self, base: &Path) {
        if let Generator::Csv { path, .. } = &mut self.data.generator {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        if let MobilityModel::Trace { path } = &mut self.mobility {
            if Path::new(path).is_relative() {
                *path = base.join(&*path).to_string_lossy().into_owned();
            }
        }
    }

    pub fn template(&self, name: &str) -> NodeTemplate {
        self.templates.get(name).cloned().unwrap_or_default()
    }

    pub fn template_names(&self) -> Vec<String> {
        if self.groups.is_empty() {
            vec![DEFAULT_TEMPLATE.to_string(); self.node_count]
        } else {
            self.groups
                .iter()
                .flat_map(|g| std::iter::repeat_n(g.template.clone(), g.count))
                .collect()
        }
    }

    pub fn radio(&self, name: &str) -> Option<RadioProfile> {
        self.radios.get(name).cloned().or_else(|| RadioProfile::builtin(name))
    }

    pub fn is_adversary(&self, node: usize) -> bool {
        self.adversaries.iter().any(|a| a.node == node)
    }

    /// Parse a config already known to be valid (e.g. a config echo).
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Build the data spec and per-node setups, reporting problems by path.
pub fn resolve(cfg: &ScenarioConfig) -> Result<Resolved> {
    let mut issues = Vec::new();
    let n = cfg.node_count;
    let seed = cfg.seed;

    let (source, k, d) = match &cfg.data.generator {
        Generator::OneHot {
            separation,
            bayes_accuracy,
            sigma,
        } => {
            let (k, d) = (cfg.data.class_count, cfg.data.feature_dim);
            let sep = match (separation, bayes_accuracy) {
                (Some(s), None) => *s,
                (None, Some(a)) => {
                    if !(*a > 1.0 / k.max(1) as f64 && *a < 1.0) {
                        issues.push(issue("$.data.generator.bayes_accuracy", "must lie strictly between 1/k and 1"));
                        1.0
                    } else {
                        datagen::separation_for_bayes_accuracy(k, *sigma, *a)
                    }
                }
                _ => {
                    issues.push(issue("$.data.generator", "give exactly one of separation, bayes_accuracy"));
                    1.0
                }
            };
            if !(*sigma > 0.0) {
                issues.push(issue("$.data.generator.sigma", "must be positive"));
            }
            if d < k {
                issues.push(issue("$.data.feature_dim", "one-hot prototypes need feature_dim >= class_count"));
                return Err(Error::Invalid { issues });
            }
            let prototypes = datagen::one_hot_prototypes(k, d, sep).map_err(|e| Error::Invalid {
                issues: vec![issue("$.data", e.to_string())],
            })?;
            (
                FeatureSource::Gaussian {
                    prototypes,
                    sigma: *sigma,
                },
                k,
                d,
            )
        }
        Generator::Random { separation, sigma } => {
            let (k, d) = (cfg.data.class_count, cfg.data.feature_dim);
            if !(*sigma > 0.0) {
                issues.push(issue("$.data.generator.sigma", "must be positive"));
            }
            let seed = rng::derive(seed, Subsystem::Prototypes, 0);
            (
                FeatureSource::Gaussian {
                    prototypes: datagen::random_prototypes(k, d, *separation, seed),
                    sigma: *sigma,
                },
                k,
                d,
            )
        }
        Generator::Csv { path, features, label } => {
            let schema = CsvSchema {
                features: features.clone(),
                label: label.clone(),
            };
            let ds = datagen::load_csv_dataset(path, &schema).map_err(|e| Error::Invalid {
                issues: vec![issue("$.data.generator.path", e.to_string())],
            })?;
            let mut pools = vec![Vec::new(); ds.class_count];
            for s in ds.samples {
                pools[s.y].push(s.x);
            }
            (
                FeatureSource::Table {
                    pools,
                    rotations: Vec::new(),
                    scale: 1.0,
                },
                ds.class_count,
                ds.feature_dim,
            )
        }
    };
    if k < 2 {
        issues.push(issue("$.data.class_count", "must be at least 2"));
    }
    if d < 1 {
        issues.push(issue("$.data.feature_dim", "must be at least 1"));
    }
    if !issues.is_empty() {
        return Err(Error::Invalid { issues });
    }

    let priors = match &cfg.data.partition {
        Partition::Iid => vec![vec![1.0 / k as f64; k]; n],
        Partition::Dirichlet { alpha } => {
            datagen::dirichlet_partition(*alpha, n, k, rng::derive(seed, Subsystem::Partition, 0)).map_err(|e| {
                Error::Invalid {
                    issues: vec![issue("$.data.partition.alpha", e.to_string())],
                }
            })?
        }
        Partition::Explicit { priors } => {
            if priors.len() != n {
                issues.push(issue(
                    "$.data.partition.priors",
                    format!("{} priors for {n} nodes", priors.len()),
                ));
            }
            priors.clone()
        }
    };

    let names = cfg.template_names();
    let mut nodes = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for name in &names {
        let t = cfg.template(name);
        let radio = cfg.radio(&t.radio).unwrap_or_else(RadioProfile::wifi);
        let mask = match &t.observed {
            Some(idx) => {
                if let Some(&bad) = idx.iter().find(|&&i| i >= d) {
                    issues.push(issue(
                        format!("$.templates.{name}.observed"),
                        format!("feature {bad} out of range (feature_dim {d})"),
                    ));
                }
                let mut m = vec![false; d];
                for &i in idx.iter().filter(|&&i| i < d) {
                    m[i] = true;
                }
                Some(m)
            }
            None => None,
        };
        let training = TrainingConfig {
            mode: t.mode.unwrap_or(cfg.training.mode),
            ..cfg.training.clone()
        };
        if cfg.policy.kind == MergeKind::Trunk && training.mode != ModelMode::OneHiddenLayer && cfg.regime != Regime::Isolated {
            issues.push(issue(
                "$.policy.kind",
                format!("trunk exchange needs one-hidden-layer nodes; template {name:?} is linear"),
            ));
        }
        if cfg.regime != Regime::NodeLearning && training.mode != cfg.training.mode {
            issues.push(issue(
                format!("$.templates.{name}.mode"),
                "mixed model modes are only supported by the node-learning regime",
            ));
        }
        masks.push(mask.clone());
        nodes.push(NodeSetup {
            template: name.clone(),
            capacity: t.capacity.clone(),
            radio,
            mask,
            training,
        });
    }
    if cfg.policy.kind == MergeKind::Average && cfg.regime != Regime::Isolated {
        let modes: Vec<ModelMode> = nodes.iter().map(|s| s.training.mode).collect();
        if modes.windows(2).any(|w| w[0] != w[1]) {
            issues.push(issue("$.policy.kind", "parameter averaging needs one model mode across nodes"));
        }
    }

    let spec = DataStreamSpec {
        class_count: k,
        feature_dim: d,
        source,
        priors,
        masks,
        drift: cfg.data.drift.clone(),
        seed: rng::derive(seed, Subsystem::Data, 0),
    };
    if issues.is_empty() {
        if let Err(e) = spec.validate() {
            issues.push(issue("$.data", e.to_string()));
        }
    }

    let trace = match &cfg.mobility {
        MobilityModel::Trace { path } => match load_contact_trace(Path::new(path)) {
            Ok(t) => t,
            Err(e) => {
                issues.push(issue("$.mobility.path", e.to_string()));
                Vec::new()
            }
        },
        _ => Vec::new(),
    };

    if issues.is_empty() {
        Ok(Resolved { nodes, spec, trace })
    } else {
        Err(Error::Invalid { issues })
    }
}
