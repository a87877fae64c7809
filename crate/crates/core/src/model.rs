//! Local learnable state: linear-softmax or one-hidden-layer tanh MLP,
//! cross-entropy objective with optional L2, and the context-gated SGD step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::context;
use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::linalg::{argmax, softmax, Matrix};
use crate::network::energy::EnergyKind;
use crate::node::NodeState;
use crate::rng::{self, Subsystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ModelMode {
    #[default]
    LinearSoftmax,
    OneHiddenLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mode: ModelMode,
    pub hidden_dim: usize,
    pub l2_penalty: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 16,
            mode: ModelMode::LinearSoftmax,
            hidden_dim: 16,
            l2_penalty: 0.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.mode == ModelMode::OneHiddenLayer && self.hidden_dim == 0 {
            return Err(Error::config("hidden dim must be at least 1"));
        }
        if !(self.l2_penalty >= 0.0) {
            return Err(Error::config("l2 penalty must be nonnegative"));
        }
        Ok(())
    }
}

/// Learnable parameters of one node.
///
/// The optional `trunk` maps features to hidden units; the `head` maps the
/// trunk output (or raw features, in linear mode) to class logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub trunk: Option<Matrix>,
    pub head: Matrix,
    pub bias: Vec<f64>,
    pub version: u64,
}

/// Gradient with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub trunk: Option<Matrix>,
    pub head: Matrix,
    pub bias: Vec<f64>,
}

pub fn init_params(
    seed: u64,
    cfg: &TrainingConfig,
    feature_dim: usize,
    class_count: usize,
) -> Result<ModelParams> {
    if feature_dim < 1 {
        return Err(Error::config("feature dim must be at least 1"));
    }
    if class_count < 2 {
        return Err(Error::config("class count must be at least 2"));
    }
    let mut rng = rng::stream(seed, Subsystem::Init, 0, 0);
    let mut draw = |rows: usize, cols: usize| {
        let scale = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        Matrix::from_vec(rows, cols, data)
    };
    let (trunk, head) = match cfg.mode {
        ModelMode::LinearSoftmax => (None, draw(feature_dim, class_count)),
        ModelMode::OneHiddenLayer => {
            let trunk = draw(feature_dim, cfg.hidden_dim);
            (Some(trunk), draw(cfg.hidden_dim, class_count))
        }
    };
    Ok(ModelParams {
        trunk,
        head,
        bias: vec![0.0; class_count],
        version: 0,
    })
}

struct Forward {
    hidden: Option<Vec<f64>>,
    proba: Vec<f64>,
}

impl ModelParams {
    pub fn feature_dim(&self) -> usize {
        match &self.trunk {
            Some(t) => t.rows(),
            None => self.head.rows(),
        }
    }

    pub fn class_count(&self) -> usize {
        self.bias.len()
    }

    pub fn mode(&self) -> ModelMode {
        if self.trunk.is_some() {
            ModelMode::OneHiddenLayer
        } else {
            ModelMode::LinearSoftmax
        }
    }

    pub fn num_params(&self) -> usize {
        self.trunk.as_ref().map_or(0, |t| t.as_slice().len())
            + self.head.as_slice().len()
            + self.bias.len()
    }

    /// Parameters flattened as trunk, head, bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        if let Some(t) = &self.trunk {
            out.extend_from_slice(t.as_slice());
        }
        out.extend_from_slice(self.head.as_slice());
        out.extend_from_slice(&self.bias);
        out
    }

    /// Overwrite parameters from a flat vector in [`Self::to_flat`] order.
    /// Does not touch `version`.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        if let Some(t) = &mut self.trunk {
            let n = t.as_slice().len();
            t.as_mut_slice().copy_from_slice(&flat[..n]);
            off = n;
        }
        let n = self.head.as_slice().len();
        self.head
            .as_mut_slice()
            .copy_from_slice(&flat[off..off + n]);
        off += n;
        self.bias.copy_from_slice(&flat[off..]);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.trunk
            .iter()
            .flat_map(|t| t.as_slice())
            .chain(self.head.as_slice())
            .chain(&self.bias)
            .all(|v| v.is_finite())
    }

    fn logits(&self, x: &[f64]) -> (Option<Vec<f64>>, Vec<f64>) {
        let hidden = self.trunk.as_ref().map(|t| {
            let mut h = vec![0.0; t.cols()];
            t.vec_mul(x, &mut h);
            h.iter_mut().for_each(|v| *v = v.tanh());
            h
        });
        let input = hidden.as_deref().unwrap_or(x);
        let mut z = vec![0.0; self.class_count()];
        self.head.vec_mul(input, &mut z);
        for (zi, b) in z.iter_mut().zip(&self.bias) {
            *zi += b;
        }
        (hidden, z)
    }

    /// Raw class logits for one input.
    pub fn predict_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.logits(x).1)
    }

    fn forward(&self, x: &[f64]) -> Forward {
        let (hidden, z) = self.logits(x);
        let mut proba = vec![0.0; z.len()];
        softmax(&z, &mut proba);
        Forward { hidden, proba }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_dim() {
            return Err(Error::Shape {
                expected: self.feature_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn sq_norm(&self) -> f64 {
        self.to_flat().iter().map(|v| v * v).sum()
    }
}

impl Gradient {
    fn zeros_like(p: &ModelParams) -> Self {
        Self {
            trunk: p.trunk.as_ref().map(|t| Matrix::zeros(t.rows(), t.cols())),
            head: Matrix::zeros(p.head.rows(), p.head.cols()),
            bias: vec![0.0; p.bias.len()],
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(t) = &self.trunk {
            out.extend_from_slice(t.as_slice());
        }
        out.extend_from_slice(self.head.as_slice());
        out.extend_from_slice(&self.bias);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

pub fn predict_proba(p: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    p.check_input(x)?;
    Ok(p.forward(x).proba)
}

fn check_batch(p: &ModelParams, batch: &[Sample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    for s in batch {
        p.check_input(&s.x)?;
        if s.y >= p.class_count() {
            return Err(Error::Shape {
                expected: p.class_count(),
                got: s.y,
            });
        }
    }
    Ok(())
}

/// Mean cross-entropy plus `l2_penalty · ‖θ‖²`.
pub fn loss(p: &ModelParams, batch: &[Sample], cfg: &TrainingConfig) -> Result<f64> {
    check_batch(p, batch)?;
    let ce: f64 = batch
        .iter()
        .map(|s| {
            let f = p.forward(&s.x);
            -f.proba[s.y].max(f64::MIN_POSITIVE).ln()
        })
        .sum::<f64>()
        / batch.len() as f64;
    let reg = if cfg.l2_penalty > 0.0 {
        cfg.l2_penalty * p.sq_norm()
    } else {
        0.0
    };
    Ok(ce + reg)
}

/// Analytic gradient of [`loss`].
pub fn grad(p: &ModelParams, batch: &[Sample], cfg: &TrainingConfig) -> Result<Gradient> {
    check_batch(p, batch)?;
    let k = p.class_count();
    let mut g = soft_target_grad(
        p,
        batch.iter().map(|s| {
            let mut t = vec![0.0; k];
            t[s.y] = 1.0;
            (s.x.as_slice(), t)
        }),
        batch.len(),
    );
    if cfg.l2_penalty > 0.0 {
        let two_l = 2.0 * cfg.l2_penalty;
        if let (Some(gt), Some(pt)) = (&mut g.trunk, &p.trunk) {
            for (gv, pv) in gt.as_mut_slice().iter_mut().zip(pt.as_slice()) {
                *gv += two_l * pv;
            }
        }
        for (gv, pv) in g.head.as_mut_slice().iter_mut().zip(p.head.as_slice()) {
            *gv += two_l * pv;
        }
        for (gv, pv) in g.bias.iter_mut().zip(&p.bias) {
            *gv += two_l * pv;
        }
    }
    Ok(g)
}

/// Mean gradient of cross-entropy against soft targets. The same gradient
/// serves KL(target ∥ model) since the two differ by the target entropy.
pub(crate) fn soft_target_grad<'a>(
    p: &ModelParams,
    samples: impl Iterator<Item = (&'a [f64], Vec<f64>)>,
    n: usize,
) -> Gradient {
    let mut g = Gradient::zeros_like(p);
    let inv_n = 1.0 / n as f64;
    let mut dz = vec![0.0; p.class_count()];
    for (x, target) in samples {
        let f = p.forward(x);
        for ((d, pr), t) in dz.iter_mut().zip(&f.proba).zip(&target) {
            *d = (pr - t) * inv_n;
        }
        for (gb, d) in g.bias.iter_mut().zip(&dz) {
            *gb += d;
        }
        match (&f.hidden, &p.trunk, &mut g.trunk) {
            (Some(h), Some(_), Some(gt)) => {
                g.head.add_outer(1.0, h, &dz);
                // back through tanh
                let da: Vec<f64> = h
                    .iter()
                    .enumerate()
                    .map(|(j, &hj)| {
                        let back: f64 = p.head.row(j).iter().zip(&dz).map(|(w, d)| w * d).sum();
                        back * (1.0 - hj * hj)
                    })
                    .collect();
                gt.add_outer(1.0, x, &da);
            }
            _ => g.head.add_outer(1.0, x, &dz),
        }
    }
    g
}

/// Mean KL(target ∥ model) over `inputs`.
#[cfg(test)]
pub(crate) fn kl_divergence(p: &ModelParams, inputs: &[&[f64]], targets: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        let q = p.forward(x).proba;
        for (ti, qi) in t.iter().zip(&q) {
            if *ti > 0.0 {
                total += ti * (ti / qi.max(f64::MIN_POSITIVE)).ln();
            }
        }
    }
    total / inputs.len().max(1) as f64
}

/// `θ ← θ − scale · g`.
pub(crate) fn apply_gradient(p: &mut ModelParams, g: &Gradient, scale: f64) {
    if let (Some(pt), Some(gt)) = (&mut p.trunk, &g.trunk) {
        for (pv, gv) in pt.as_mut_slice().iter_mut().zip(gt.as_slice()) {
            *pv -= scale * gv;
        }
    }
    for (pv, gv) in p.head.as_mut_slice().iter_mut().zip(g.head.as_slice()) {
        *pv -= scale * gv;
    }
    for (pv, gv) in p.bias.iter_mut().zip(&g.bias) {
        *pv -= scale * gv;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    InsufficientEnergy,
    ZeroGate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied { gate: f64 },
    Skipped(SkipReason),
}

/// One context-gated SGD step: `θ ← θ − η · ω(c) · ∇F`.
///
/// With `gating` off the gate is fixed at one. A step the node cannot pay
/// for, or whose gate is zero, leaves the parameters untouched and counts as
/// skipped.
pub fn local_step(
    node: &mut NodeState,
    batch: &[Sample],
    cfg: &TrainingConfig,
    gating: bool,
) -> Result<StepOutcome> {
    let cost = node.capacity.step_energy_j;
    if node.energy.level() < cost {
        node.skipped += 1;
        return Ok(StepOutcome::Skipped(SkipReason::InsufficientEnergy));
    }
    let gate = if gating {
        context::gate(&node.context)
    } else {
        1.0
    };
    if gate == 0.0 {
        node.skipped += 1;
        return Ok(StepOutcome::Skipped(SkipReason::ZeroGate));
    }
    let g = grad(&node.params, batch, cfg)?;
    apply_gradient(&mut node.params, &g, cfg.learning_rate * gate);
    node.params.version += 1;
    node.energy.debit(EnergyKind::Step, cost);
    node.updates += 1;
    node.samples_seen += batch.len() as u64;
    Ok(StepOutcome::Applied { gate })
}

/// Fraction of argmax-correct predictions; ties go to the lowest class index.
pub fn evaluate_accuracy(p: &ModelParams, test: &[Sample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::usage("empty test set"));
    }
    let mut correct = 0usize;
    for s in test {
        p.check_input(&s.x)?;
        if argmax(&p.logits(&s.x).1) == s.y {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn cfg(mode: ModelMode) -> TrainingConfig {
        TrainingConfig {
            mode,
            hidden_dim: 4,
            ..Default::default()
        }
    }

    fn random_batch(seed: u64, n: usize, d: usize, k: usize) -> Vec<Sample> {
        let mut rng = rng::stream(seed, Subsystem::Data, 99, 0);
        (0..n)
            .map(|_| Sample {
                x: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                y: rng.random_range(0..k),
            })
            .collect()
    }

    fn zero_params(d: usize, k: usize) -> ModelParams {
        ModelParams {
            trunk: None,
            head: Matrix::zeros(d, k),
            bias: vec![0.0; k],
            version: 0,
        }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let c = cfg(ModelMode::LinearSoftmax);
        let a = init_params(7, &c, 3, 2).unwrap();
        let b = init_params(7, &c, 3, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.head.shape(), (3, 2));
        assert_eq!(a.bias, vec![0.0, 0.0]);
        assert_eq!(a.version, 0);
        assert!(a.trunk.is_none());

        let m = init_params(7, &cfg(ModelMode::OneHiddenLayer), 3, 2).unwrap();
        assert_eq!(m.trunk.as_ref().unwrap().shape(), (3, 4));
        assert_eq!(m.head.shape(), (4, 2));
    }

    #[test]
    fn init_rejects_bad_dimensions() {
        let c = cfg(ModelMode::LinearSoftmax);
        assert!(matches!(init_params(1, &c, 0, 2), Err(Error::Config(_))));
        assert!(matches!(init_params(1, &c, 3, 1), Err(Error::Config(_))));
    }

    #[test]
    fn init_entries_are_centred() {
        // Each entry is uniform on (-1/√3, 1/√3): variance 1/9 per entry.
        let c = cfg(ModelMode::LinearSoftmax);
        let seeds = 10_000u64;
        let mut sum = 0.0;
        let mut count = 0usize;
        for seed in 0..seeds {
            let p = init_params(seed, &c, 3, 2).unwrap();
            sum += p.head.as_slice().iter().sum::<f64>();
            count += p.head.as_slice().len();
        }
        let mean = sum / count as f64;
        let sigma = (1.0 / 9.0 / count as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean} vs 3σ {}", 3.0 * sigma);
    }

    #[test]
    fn zero_params_give_uniform_probabilities() {
        let p = zero_params(3, 4);
        let pr = predict_proba(&p, &[1.0, -2.0, 0.5]).unwrap();
        assert!(pr.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn predict_rejects_wrong_dimension() {
        let p = zero_params(3, 2);
        assert!(matches!(
            predict_proba(&p, &[1.0, 2.0]),
            Err(Error::Shape { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn loss_of_uniform_prediction_is_ln_k() {
        let p = zero_params(2, 5);
        let batch = random_batch(1, 8, 2, 5);
        let l = loss(&p, &batch, &TrainingConfig::default()).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let mut p = zero_params(1, 2);
        p.bias = vec![50.0, 0.0];
        let batch = vec![Sample { x: vec![0.0], y: 0 }];
        let l = loss(&p, &batch, &TrainingConfig::default()).unwrap();
        assert!(l < 1e-20);
    }

    #[test]
    fn empty_batch_is_a_usage_error() {
        let p = zero_params(2, 2);
        let c = TrainingConfig::default();
        assert!(matches!(loss(&p, &[], &c), Err(Error::Usage(_))));
        assert!(matches!(grad(&p, &[], &c), Err(Error::Usage(_))));
        assert!(matches!(evaluate_accuracy(&p, &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn bias_gradient_at_zero_params_is_prediction_minus_label_mean() {
        // Two samples with mirrored features and opposite labels; uniform
        // prediction (0.5, 0.5) at zero params.
        // bias grad = mean(p - onehot) = ((0.5-1 + 0.5-0)/2, (0.5-0 + 0.5-1)/2) = (0, 0)
        // head grad row 0 = mean(x0 * (p - onehot)) = (1*(-0.5) + (-1)*(0.5))/2 = -0.5 for class 0
        let p = zero_params(1, 2);
        let batch = vec![
            Sample { x: vec![1.0], y: 0 },
            Sample { x: vec![-1.0], y: 1 },
        ];
        let g = grad(&p, &batch, &TrainingConfig::default()).unwrap();
        assert_eq!(g.bias, vec![0.0, 0.0]);
        assert_eq!(g.head.as_slice(), &[-0.5, 0.5]);

        // Unbalanced labels: both class 0 -> bias grad = (-0.5, 0.5).
        let batch = vec![Sample { x: vec![1.0], y: 0 }, Sample { x: vec![-1.0], y: 0 }];
        let g = grad(&p, &batch, &TrainingConfig::default()).unwrap();
        assert_eq!(g.bias, vec![-0.5, 0.5]);
    }

    #[test]
    fn duplicated_batch_leaves_gradient_unchanged() {
        let c = cfg(ModelMode::OneHiddenLayer);
        let p = init_params(3, &c, 4, 3).unwrap();
        let batch = random_batch(5, 6, 4, 3);
        let doubled: Vec<Sample> = batch.iter().chain(&batch).cloned().collect();
        let a = grad(&p, &batch, &c).unwrap().to_flat();
        let b = grad(&p, &doubled, &c).unwrap().to_flat();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-15 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn full_batch_descent_is_monotone_on_separable_data() {
        let c = TrainingConfig {
            learning_rate: 0.01,
            ..Default::default()
        };
        let mut p = init_params(11, &c, 2, 2).unwrap();
        let batch = vec![
            Sample { x: vec![1.0, 1.0], y: 0 },
            Sample { x: vec![2.0, 1.5], y: 0 },
            Sample { x: vec![-1.0, -1.0], y: 1 },
            Sample { x: vec![-1.5, -2.0], y: 1 },
        ];
        let mut prev = loss(&p, &batch, &c).unwrap();
        for _ in 0..100 {
            let g = grad(&p, &batch, &c).unwrap();
            apply_gradient(&mut p, &g, c.learning_rate);
            let l = loss(&p, &batch, &c).unwrap();
            assert!(l <= prev, "loss rose from {prev} to {l}");
            prev = l;
        }
    }

    #[test]
    fn memorised_set_scores_perfect_accuracy() {
        let mut p = zero_params(10, 10);
        let test: Vec<Sample> = (0..10)
            .map(|c| {
                let mut x = vec![0.0; 10];
                x[c] = 1.0;
                Sample { x, y: c }
            })
            .collect();
        for c in 0..10 {
            p.head.set(c, c, 5.0);
        }
        assert_eq!(evaluate_accuracy(&p, &test).unwrap(), 1.0);
        let doubled: Vec<Sample> = test.iter().chain(&test).cloned().collect();
        assert_eq!(evaluate_accuracy(&p, &doubled).unwrap(), 1.0);
    }

    #[test]
    fn random_params_score_chance_on_balanced_data() {
        // Labels independent of features: accuracy ~ Binomial(n, 1/k)/n.
        let k = 4;
        let n = 20_000;
        let c = TrainingConfig::default();
        let p = init_params(21, &c, 5, k).unwrap();
        let test = random_batch(8, n, 5, k);
        let acc = evaluate_accuracy(&p, &test).unwrap();
        let pk = 1.0 / k as f64;
        let sigma = (pk * (1.0 - pk) / n as f64).sqrt();
        assert!((acc - pk).abs() < 3.0 * sigma, "acc {acc}");
    }

    proptest! {
        #[test]
        fn probabilities_normalise(seed in 0u64..1000, hidden in proptest::bool::ANY) {
            let mode = if hidden { ModelMode::OneHiddenLayer } else { ModelMode::LinearSoftmax };
            let c = cfg(mode);
            let p = init_params(seed, &c, 6, 5).unwrap();
            let x = &random_batch(seed, 1, 6, 5)[0].x;
            let pr = predict_proba(&p, x).unwrap();
            let sum: f64 = pr.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(pr.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn loss_is_nonnegative(seed in 0u64..1000) {
            let c = TrainingConfig { l2_penalty: 0.01, ..cfg(ModelMode::OneHiddenLayer) };
            let p = init_params(seed, &c, 3, 3).unwrap();
            let batch = random_batch(seed + 1, 5, 3, 3);
            prop_assert!(loss(&p, &batch, &c).unwrap() >= 0.0);
        }
    }
}
