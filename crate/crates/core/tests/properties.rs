use proptest::prelude::*;
use rand::Rng;

use nodelearn::coalition::form_clusters;
use nodelearn::context::ContextVector;
use nodelearn::datagen::{self, DataStreamSpec, FeatureSource, Sample};
use nodelearn::exchange::{self, KnowledgePacket, MergeWeights, PacketKind, ProbeSet};
use nodelearn::model::{self, ModelMode, SkipReason, StepOutcome, TrainingConfig};
use nodelearn::network::{self, MobilityModel, MobilityState, RadioProfile};
use nodelearn::node::NodeState;
use nodelearn::resources::{CapacityProfile, OffloadStore};
use nodelearn::rng::{self, Subsystem};

fn batch(seed: u64, n: usize, d: usize, k: usize) -> Vec<Sample> {
    let mut r = rng::stream(seed, Subsystem::Data, 0, 0);
    (0..n)
        .map(|_| Sample {
            x: (0..d).map(|_| r.random_range(-2.0..2.0)).collect(),
            y: r.random_range(0..k),
        })
        .collect()
}

fn node(id: usize, seed: u64, d: usize, k: usize) -> NodeState {
    let p = model::init_params(seed, &TrainingConfig::default(), d, k).unwrap();
    NodeState::new(id, p, CapacityProfile::default(), 16)
}

fn full_packet(n: &NodeState) -> KnowledgePacket {
    let probe = ProbeSet::new(vec![Sample { x: vec![0.0; n.params.feature_dim()], y: 0 }]).unwrap();
    exchange::encode_packet(n, PacketKind::FullParams, &probe, 1).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_matches_central_differences(
        seed in 0u64..10_000,
        hidden in any::<bool>(),
        d in 1usize..6,
        k in 2usize..5,
        n in 1usize..9,
        l2 in prop_oneof![Just(0.0), 0.0f64..0.1],
    ) {
        let cfg = TrainingConfig {
            mode: if hidden { ModelMode::OneHiddenLayer } else { ModelMode::LinearSoftmax },
            hidden_dim: 4,
            l2_penalty: l2,
            ..Default::default()
        };
        let p = model::init_params(seed, &cfg, d, k).unwrap();
        let b = batch(seed, n, d, k);
        let g = model::grad(&p, &b, &cfg).unwrap().to_flat();
        let theta = p.to_flat();
        let h = 1e-5;
        let fd: Vec<f64> = (0..theta.len())
            .map(|i| {
                let mut q = p.clone();
                let mut v = theta.clone();
                v[i] = theta[i] + h;
                q.set_flat(&v).unwrap();
                let up = model::loss(&q, &b, &cfg).unwrap();
                v[i] = theta[i] - h;
                q.set_flat(&v).unwrap();
                let down = model::loss(&q, &b, &cfg).unwrap();
                (up - down) / (2.0 * h)
            })
            .collect();
        let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / norm(&g).max(norm(&fd)).max(1e-12);
        prop_assert!(rel < 1e-5, "relative error {rel:e}");
    }

    #[test]
    fn zero_gate_step_is_identity(seed in 0u64..1000, salience in 0.0f64..3.0) {
        let mut n = node(0, seed, 3, 3);
        n.context = ContextVector { energy_fraction: 0.0, salience, ..Default::default() };
        let before = n.params.clone();
        let out = model::local_step(&mut n, &batch(seed, 4, 3, 3), &TrainingConfig::default(), true).unwrap();
        prop_assert_eq!(out, StepOutcome::Skipped(SkipReason::ZeroGate));
        prop_assert_eq!(n.params, before);
    }

    #[test]
    fn unit_self_weight_merge_is_identity(seed in 0u64..1000, peers in 1usize..5) {
        let mut me = node(0, seed, 4, 3);
        let others: Vec<NodeState> = (1..=peers).map(|i| node(i, seed + i as u64, 4, 3)).collect();
        let packets: Vec<KnowledgePacket> = others.iter().map(full_packet).collect();
        let refs: Vec<&KnowledgePacket> = packets.iter().collect();
        let before = me.params.clone();
        exchange::merge_average(&mut me, &refs, &MergeWeights::identity(peers));
        prop_assert_eq!(me.params, before);
    }

    /// Metropolis weights on an undirected graph are doubly stochastic, so
    /// a simultaneous round preserves the population mean.
    #[test]
    fn doubly_stochastic_round_preserves_mean(
        seed in 0u64..1000,
        n in 2usize..8,
        edges in proptest::collection::vec(any::<bool>(), 28),
    ) {
        let adj = |i: usize, j: usize| {
            let (a, b) = (i.min(j), i.max(j));
            i != j && edges[b * (b - 1) / 2 + a]
        };
        let deg: Vec<usize> = (0..n).map(|i| (0..n).filter(|&j| adj(i, j)).count()).collect();
        let mut nodes: Vec<NodeState> = (0..n).map(|i| node(i, seed * 31 + i as u64, 3, 2)).collect();
        let packets: Vec<KnowledgePacket> = nodes.iter().map(full_packet).collect();
        let mean = |ns: &[NodeState]| -> Vec<f64> {
            let mut m = vec![0.0; ns[0].params.num_params()];
            for x in ns {
                for (a, b) in m.iter_mut().zip(x.params.to_flat()) {
                    *a += b / ns.len() as f64;
                }
            }
            m
        };
        let before = mean(&nodes);
        for (i, me) in nodes.iter_mut().enumerate() {
            let nbrs: Vec<usize> = (0..n).filter(|&j| adj(i, j)).collect();
            let peers: Vec<f64> = nbrs.iter().map(|&j| 1.0 / (1 + deg[i].max(deg[j])) as f64).collect();
            let w = MergeWeights { self_weight: 1.0 - peers.iter().sum::<f64>(), peers, fallback: false };
            let refs: Vec<&KnowledgePacket> = nbrs.iter().map(|&j| &packets[j]).collect();
            let rep = exchange::merge_average(me, &refs, &w);
            prop_assert!(rep.rejected.is_empty());
        }
        for (a, b) in before.iter().zip(mean(&nodes)) {
            prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn clustering_is_a_pure_partition(
        n in 1usize..10,
        pairs in proptest::collection::vec((0usize..10, 0usize..10), 0..30),
        caps in proptest::collection::vec(0.0f64..5.0, 10),
    ) {
        let contacts: Vec<network::ContactEvent> = pairs
            .iter()
            .filter(|(a, b)| a != b && *a < n && *b < n)
            .flat_map(|&(a, b)| [(a, b), (b, a)])
            .map(|(from, to)| network::ContactEvent { time: 0, from, to, distance: 1.0, loss_prob: 0.0, max_bytes: 1 })
            .collect();
        let active = vec![true; n];
        let (mut id_a, mut id_b) = (7, 7);
        let a = form_clusters(&contacts, &caps[..n], &active, 3, 2, &mut id_a);
        let b = form_clusters(&contacts, &caps[..n], &active, 3, 2, &mut id_b);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(id_a, id_b);
        let mut seen = vec![0; n];
        for c in &a {
            prop_assert!(c.members.contains(&c.coordinator));
            let best = c.members.iter().map(|&m| caps[m]).fold(f64::MIN, f64::max);
            prop_assert_eq!(caps[c.coordinator], best);
            for &m in &c.members {
                seen[m] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn hosted_bytes_never_exceed_memory(
        mem in 0u64..2000,
        batches in proptest::collection::vec((0usize..3, 0usize..12), 1..20),
    ) {
        let mut store = OffloadStore::default();
        for (t, (owner, count)) in batches.into_iter().enumerate() {
            let free = mem.saturating_sub(store.hosted_bytes(9));
            let entries = (0..count).map(|i| Sample { x: vec![i as f64; 3], y: 0 }).collect();
            store.offload_replay(owner, 9, entries, free, t as u64, 100);
            prop_assert!(store.hosted_bytes(9) <= mem);
        }
    }

    #[test]
    fn equal_profiles_give_symmetric_contacts(
        pos in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0), 2..10),
        range in 1.0f64..80.0,
    ) {
        let n = pos.len();
        let m = MobilityState::new(MobilityModel::StaticPositions { positions: pos }, n, 1, Vec::new()).unwrap();
        let radio = RadioProfile { range, ..RadioProfile::wifi() };
        let cs = network::compute_contacts(&m, &vec![radio; n], &vec![true; n], 0, 1.0);
        for c in &cs {
            prop_assert!(cs.iter().any(|r| r.from == c.to && r.to == c.from));
        }
    }
}

/// With a shared prior and no drift, two nodes' empirical label
/// frequencies over 10^5 draws differ by at most three binomial sigmas.
#[test]
fn iid_streams_agree_within_binomial_noise() {
    let k = 5;
    let prior = vec![0.1, 0.3, 0.2, 0.25, 0.15];
    let spec = DataStreamSpec {
        class_count: k,
        feature_dim: k,
        source: FeatureSource::Gaussian { prototypes: datagen::one_hot_prototypes(k, k, 2.0).unwrap(), sigma: 1.0 },
        priors: vec![prior.clone(); 6],
        masks: vec![None; 6],
        drift: Vec::new(),
        seed: 42,
    };
    spec.validate().unwrap();
    let draws = 100_000;
    let freq = |node: usize| {
        let mut r = rng::stream(spec.seed, Subsystem::Data, node as u64, 0);
        let mut f = vec![0.0; k];
        for s in datagen::sample_batch(&spec, node, draws, &mut r) {
            f[s.y] += 1.0 / draws as f64;
        }
        f
    };
    let fs: Vec<Vec<f64>> = (0..6).map(freq).collect();
    for a in 0..6 {
        for b in a + 1..6 {
            for c in 0..k {
                let sigma = (2.0 * prior[c] * (1.0 - prior[c]) / draws as f64).sqrt();
                let gap = (fs[a][c] - fs[b][c]).abs();
                assert!(gap <= 3.0 * sigma, "nodes {a},{b} class {c}: gap {gap} > 3 sigma {sigma}");
            }
        }
    }
}

#[test]
fn loss_descends_on_separable_toy_batch() {
    let cfg = TrainingConfig { learning_rate: 0.01, ..Default::default() };
    let b: Vec<Sample> = (0..8)
        .map(|i| Sample { x: vec![if i % 2 == 0 { 1.0 } else { -1.0 }, 0.5], y: i % 2 })
        .collect();
    let mut n = node(0, 3, 2, 2);
    let mut last = model::loss(&n.params, &b, &cfg).unwrap();
    for _ in 0..100 {
        model::local_step(&mut n, &b, &cfg, false).unwrap();
        let l = model::loss(&n.params, &b, &cfg).unwrap();
        assert!(l <= last, "{l} > {last}");
        last = l;
    }
}
