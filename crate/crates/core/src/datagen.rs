//! Synthetic non-IID, drifting per-node data streams and CSV ingestion.
//!
//! Labels are drawn from a per-node class prior (Dirichlet skew controls how
//! non-IID the population is). Features come either from isotropic Gaussians
//! around class prototypes or, for ingested tables, from the rows of the
//! chosen class. Drift is a schedule of piecewise-constant changes.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Subsystem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriftKind {
    /// Rotate every class mean by `angle` radians in the plane spanned by
    /// feature axes `plane.0` and `plane.1`.
    PrototypeRotation { angle: f64, plane: (usize, usize) },
    /// Swap the prior mass of two classes on every node.
    PriorShift { classes: (usize, usize) },
    /// Multiply the feature noise scale by `factor`.
    CovariateScale { factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEvent {
    pub tick: u64,
    #[serde(flatten)]
    pub kind: DriftKind,
}

/// How features are produced for a given label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureSource {
    Gaussian {
        prototypes: Vec<Vec<f64>>,
        sigma: f64,
    },
    /// Rows of an ingested table grouped by class. Drift acts on sampled
    /// rows through an accumulated rotation list and scale.
    Table {
        pools: Vec<Vec<Vec<f64>>>,
        rotations: Vec<((usize, usize), f64)>,
        scale: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataStreamSpec {
    pub class_count: usize,
    pub feature_dim: usize,
    pub source: FeatureSource,
    pub priors: Vec<Vec<f64>>,
    /// Per-node observed-feature masks; `None` observes every dimension.
    pub masks: Vec<Option<Vec<bool>>>,
    /// Pending drift events, strictly increasing in tick.
    pub drift: Vec<DriftEvent>,
    pub seed: u64,
}

impl DataStreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::config("class count must be at least 2"));
        }
        if self.feature_dim < 1 {
            return Err(Error::config("feature dim must be at least 1"));
        }
        for (i, p) in self.priors.iter().enumerate() {
            if p.len() != self.class_count {
                return Err(Error::config(format!("prior {i} has wrong length")));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || p.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::config(format!("prior {i} is not a probability vector")));
            }
        }
        match &self.source {
            FeatureSource::Gaussian { prototypes, sigma } => {
                if !(*sigma >= 0.0) {
                    return Err(Error::config("sigma must be nonnegative"));
                }
                if prototypes.len() != self.class_count
                    || prototypes.iter().any(|p| p.len() != self.feature_dim)
                {
                    return Err(Error::config("prototype shape mismatch"));
                }
            }
            FeatureSource::Table { pools, .. } => {
                if pools.len() != self.class_count {
                    return Err(Error::config("table pools do not cover every class"));
                }
            }
        }
        for w in self.drift.windows(2) {
            if w[1].tick <= w[0].tick {
                return Err(Error::config("drift times must be strictly increasing"));
            }
        }
        for ev in &self.drift {
            ev.kind.validate(self.class_count, self.feature_dim)?;
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.priors.len()
    }

    pub fn mask(&self, node: usize) -> Option<&[bool]> {
        self.masks.get(node).and_then(|m| m.as_deref())
    }
}

impl DriftKind {
    fn validate(&self, k: usize, d: usize) -> Result<()> {
        match *self {
            DriftKind::PrototypeRotation { angle, plane } => {
                if !angle.is_finite() || plane.0 >= d || plane.1 >= d || plane.0 == plane.1 {
                    return Err(Error::config("rotation plane must name two distinct feature axes"));
                }
            }
            DriftKind::PriorShift { classes } => {
                if classes.0 >= k || classes.1 >= k {
                    return Err(Error::config("prior shift names an unknown class"));
                }
            }
            DriftKind::CovariateScale { factor } => {
                if !(factor > 0.0 && factor.is_finite()) {
                    return Err(Error::config("covariate scale factor must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// Gamma(α, 1) draw in log space; stable for very small α.
fn log_gamma_draw(alpha: f64, rng: &mut impl Rng) -> f64 {
    if alpha >= 1.0 {
        let g: f64 = Gamma::new(alpha, 1.0).expect("alpha > 0").sample(rng);
        g.ln()
    } else {
        // Gamma(α) = Gamma(α + 1) · U^(1/α)
        let g: f64 = Gamma::new(alpha + 1.0, 1.0).expect("alpha > 0").sample(rng);
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        g.ln() + u.ln() / alpha
    }
}

/// One Dirichlet(α·1_k) class prior per node.
pub fn dirichlet_partition(alpha: f64, node_count: usize, k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config("dirichlet alpha must be positive"));
    }
    if k < 1 {
        return Err(Error::config("class count must be positive"));
    }
    Ok((0..node_count)
        .map(|node| {
            let mut rng = rng::stream(seed, Subsystem::Partition, node as u64, 0);
            let logs: Vec<f64> = (0..k).map(|_| log_gamma_draw(alpha, &mut rng)).collect();
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = w.iter().sum();
            w.into_iter().map(|v| v / sum).collect()
        })
        .collect())
}

/// Prototypes `separation · e_c`: equidistant class means on the first `k`
/// axes. Requires `d ≥ k`.
pub fn one_hot_prototypes(k: usize, d: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    if d < k {
        return Err(Error::config("one-hot prototypes need feature dim >= class count"));
    }
    Ok((0..k)
        .map(|c| {
            let mut v = vec![0.0; d];
            v[c] = separation;
            v
        })
        .collect())
}

/// Gaussian random prototypes scaled to norm `separation / √2`, so the
/// expected pairwise distance matches the one-hot layout.
pub fn random_prototypes(k: usize, d: usize, separation: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, Subsystem::Prototypes, 0, 0);
    (0..k)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|a| a * separation / norm).collect()
        })
        .collect()
}

fn draw_label(prior: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    // Rounding left u above the cumulative sum: last class with mass.
    prior.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

fn rotate(x: &mut [f64], (a, b): (usize, usize), angle: f64) {
    let (s, c) = angle.sin_cos();
    let (xa, xb) = (x[a], x[b]);
    x[a] = c * xa - s * xb;
    x[b] = s * xa + c * xb;
}

pub fn apply_mask(x: &mut [f64], mask: Option<&[bool]>) {
    if let Some(m) = mask {
        for (v, keep) in x.iter_mut().zip(m) {
            if !keep {
                *v = 0.0;
            }
        }
    }
}

fn draw_features(source: &FeatureSource, label: usize, rng: &mut impl Rng) -> Vec<f64> {
    match source {
        FeatureSource::Gaussian { prototypes, sigma } => prototypes[label]
            .iter()
            .map(|m| {
                let z: f64 = rng.sample(StandardNormal);
                m + sigma * z
            })
            .collect(),
        FeatureSource::Table {
            pools,
            rotations,
            scale,
        } => {
            let pool = &pools[label];
            let mut x = pool[rng.random_range(0..pool.len())].clone();
            for &(plane, angle) in rotations {
                rotate(&mut x, plane, angle);
            }
            if *scale != 1.0 {
                x.iter_mut().for_each(|v| *v *= scale);
            }
            x
        }
    }
}

/// Draw `n` samples from `prior` using `rng`; no mask applied.
pub fn sample_with_prior(spec: &DataStreamSpec, prior: &[f64], n: usize, rng: &mut impl Rng) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let y = draw_label(prior, rng);
            let x = draw_features(&spec.source, y, rng);
            Sample { x, y }
        })
        .collect()
}

/// `n` samples of node `node`'s stream under the current (drifted) spec,
/// with the node's feature mask applied.
pub fn sample_batch(spec: &DataStreamSpec, node: usize, n: usize, rng: &mut impl Rng) -> Vec<Sample> {
    let mut batch = sample_with_prior(spec, &spec.priors[node], n, rng);
    let mask = spec.mask(node);
    for s in &mut batch {
        apply_mask(&mut s.x, mask);
    }
    batch
}

/// The training batch node `node` sees at tick `t`, drawn from its own
/// counter-based stream.
pub fn node_batch(spec: &DataStreamSpec, node: usize, t: u64, n: usize) -> Vec<Sample> {
    let mut rng = rng::stream(spec.seed, Subsystem::Data, node as u64, t);
    sample_batch(spec, node, n, &mut rng)
}

/// Balanced-prior evaluation set for drift epoch `epoch`; unmasked.
pub fn test_set(spec: &DataStreamSpec, n: usize, epoch: u64) -> Vec<Sample> {
    let uniform = vec![1.0 / spec.class_count as f64; spec.class_count];
    let mut rng = rng::stream(spec.seed, Subsystem::TestSet, 0, epoch);
    sample_with_prior(spec, &uniform, n, &mut rng)
}

/// Shared probe set: balanced prior, fixed for the whole run.
pub fn probe_set(spec: &DataStreamSpec, n: usize) -> Vec<Sample> {
    let uniform = vec![1.0 / spec.class_count as f64; spec.class_count];
    let mut rng = rng::stream(spec.seed, Subsystem::Probe, 0, 0);
    sample_with_prior(spec, &uniform, n, &mut rng)
}

/// Node-private validation slice from the node's own prior for drift epoch
/// `epoch`, masked like its training data.
pub fn validation_slice(spec: &DataStreamSpec, node: usize, n: usize, epoch: u64) -> Vec<Sample> {
    let mut rng = rng::stream(spec.seed, Subsystem::Validation, node as u64, epoch);
    sample_batch(spec, node, n, &mut rng)
}

impl DriftKind {
    fn apply(&self, spec: &mut DataStreamSpec) {
        match (*self, &mut spec.source) {
            (DriftKind::PrototypeRotation { angle, plane }, FeatureSource::Gaussian { prototypes, .. }) => {
                for p in prototypes.iter_mut() {
                    rotate(p, plane, angle);
                }
            }
            (DriftKind::PrototypeRotation { angle, plane }, FeatureSource::Table { rotations, .. }) => {
                rotations.push((plane, angle));
            }
            (DriftKind::CovariateScale { factor }, FeatureSource::Gaussian { sigma, .. }) => {
                *sigma *= factor;
            }
            (DriftKind::CovariateScale { factor }, FeatureSource::Table { scale, .. }) => {
                *scale *= factor;
            }
            (DriftKind::PriorShift { classes: (a, b) }, _) => {
                for p in spec.priors.iter_mut() {
                    p.swap(a, b);
                }
            }
        }
    }
}

/// Apply and consume every scheduled drift event at tick `t`.
pub fn inject_drift(spec: &DataStreamSpec, t: u64) -> Result<DataStreamSpec> {
    if !spec.drift.iter().any(|e| e.tick == t) {
        return Err(Error::usage(format!("no drift scheduled at tick {t}")));
    }
    let mut next = spec.clone();
    let (due, rest): (Vec<_>, Vec<_>) = spec.drift.iter().cloned().partition(|e| e.tick == t);
    next.drift = rest;
    for ev in due {
        ev.kind.validate(next.class_count, next.feature_dim)?;
        ev.kind.apply(&mut next);
    }
    Ok(next)
}

/// Which columns of a CSV file hold features and the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvDataset {
    pub samples: Vec<Sample>,
    pub feature_dim: usize,
    pub class_count: usize,
    /// Original label text for each dense class index.
    pub label_names: Vec<String>,
}

/// Load a pre-featurised table. Rows keep file order; labels are re-indexed
/// densely in order of first appearance. Error rows are file line numbers
/// (the header is line 1).
pub fn load_csv_dataset(path: &Path, schema: &CsvSchema) -> Result<CsvDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Ingestion {
                row: 1,
                message: format!("{other:?}"),
            },
        })?;
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Ingestion {
            row: 1,
            message: format!("missing column {name:?}"),
        })
    };
    let feature_cols = schema
        .features
        .iter()
        .map(|f| column(f))
        .collect::<Result<Vec<_>>>()?;
    let label_col = column(&schema.label)?;
    if feature_cols.is_empty() {
        return Err(Error::Ingestion {
            row: 1,
            message: "no feature columns".into(),
        });
    }

    let mut label_index: HashMap<String, usize> = HashMap::new();
    let mut label_names = Vec::new();
    let mut samples = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Ingestion {
            row,
            message: e.to_string(),
        })?;
        let x = feature_cols
            .iter()
            .zip(&schema.features)
            .map(|(&c, name)| {
                let raw = rec.get(c).unwrap_or("").trim();
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Ingestion {
                        row,
                        message: format!("non-numeric value {raw:?} in column {name:?}"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let raw_label = rec.get(label_col).unwrap_or("").trim().to_string();
        if raw_label.is_empty() {
            return Err(Error::Ingestion {
                row,
                message: "empty label".into(),
            });
        }
        let next = label_index.len();
        let y = *label_index.entry(raw_label.clone()).or_insert_with(|| {
            label_names.push(raw_label);
            next
        });
        samples.push(Sample { x, y });
    }
    if samples.is_empty() {
        return Err(Error::Ingestion {
            row: 1,
            message: "no data rows".into(),
        });
    }
    Ok(CsvDataset {
        feature_dim: feature_cols.len(),
        class_count: label_names.len(),
        samples,
        label_names,
    })
}

/// Write samples as `f0..f{d-1},label` with integer labels.
pub fn write_csv_dataset(path: &Path, samples: &[Sample]) -> Result<CsvSchema> {
    let d = samples.first().map_or(0, |s| s.x.len());
    let features: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::usage(format!("{other:?}")),
    })?;
    let mut header = features.clone();
    header.push("label".into());
    w.write_record(&header)?;
    for s in samples {
        let mut row: Vec<String> = s.x.iter().map(|v| v.to_string()).collect();
        row.push(s.y.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(CsvSchema {
        features,
        label: "label".into(),
    })
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Bayes-optimal accuracy for equidistant one-hot prototypes
/// (`separation · e_c`) with isotropic noise `sigma` and a balanced prior:
/// `∫ φ(z) Φ(z + separation/σ)^(k-1) dz`, by composite Simpson quadrature.
pub fn bayes_accuracy_one_hot(k: usize, separation: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    let shift = separation / sigma;
    let (lo, hi, n) = (-12.0, 12.0 + shift.max(0.0), 8000usize);
    let h = (hi - lo) / n as f64;
    let f = |z: f64| {
        let phi = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        phi * normal_cdf(z + shift).powi(k as i32 - 1)
    };
    let mut sum = f(lo) + f(hi);
    for i in 1..n {
        let z = lo + i as f64 * h;
        sum += if i % 2 == 1 { 4.0 } else { 2.0 } * f(z);
    }
    sum * h / 3.0
}

/// Separation giving the requested Bayes accuracy for the one-hot layout.
pub fn separation_for_bayes_accuracy(k: usize, sigma: f64, target: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 50.0 * sigma.max(1e-12));
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if bayes_accuracy_one_hot(k, mid, sigma) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
