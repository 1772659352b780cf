//! The learnable value model: state features, scalar value heads, and the
//! TD(0) training loop.
//!
//! A state is one (sentence, image) pair; its features are the
//! concatenation of the L2-normalized text and image embeddings. A value
//! head maps features to a scalar estimate of the discounted long-term
//! reward from that state. Training is semi-gradient TD(0): each batch
//! regresses predictions onto `reward + gamma * V(next)` with the target
//! held constant, minimizing the mean squared TD error (which is reported
//! and is always non-negative).

use std::collections::{BTreeMap, HashMap};
use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{EmbeddingProvider, ImageRef, ProviderError};
use crate::reward::RewardScore;
use crate::simlab::splitmix64;

#[derive(Debug, Error)]
pub enum ValueError {
    #[error("feature shape mismatch: head expects {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch} (learning rate too high?)")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("gradient check requires a differentiable (non-tabular) head")]
    TabularNotDifferentiable,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(String),
    #[error("not a value-head checkpoint (format {found:?})")]
    FormatMismatch { found: String },
    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Feature vector of one (sentence, image) state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateFeatures {
    values: Vec<f64>,
}

impl StateFeatures {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Stable content key of a feature vector, used by tabular heads. Distinct
/// states produce distinct embeddings, so the bit pattern identifies the
/// state.
pub fn feature_key(features: &StateFeatures) -> u64 {
    let mut h = DefaultHasher::new();
    features.values.len().hash(&mut h);
    for v in &features.values {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Computes state features through an embedding provider, caching per
/// (sentence, image) since search and data construction revisit states
/// heavily.
pub struct Featurizer {
    embedder: Arc<dyn EmbeddingProvider>,
    cache: Mutex<HashMap<(String, String), StateFeatures>>,
    image_cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl Featurizer {
    pub fn new(embedder: Arc<dyn EmbeddingProvider>) -> Self {
        Self {
            embedder,
            cache: Mutex::new(HashMap::new()),
            image_cache: Mutex::new(HashMap::new()),
        }
    }

    /// Output dimension: text half + image half.
    pub fn dim(&self) -> usize {
        2 * self.embedder.dim()
    }

    /// Concatenation of the L2-normalized text embedding and the
    /// L2-normalized image embedding.
    pub fn featurize(&self, sentence: &str, image: &ImageRef) -> Result<StateFeatures, ValueError> {
        if sentence.trim().is_empty() {
            return Err(ProviderError::InvalidRequest("cannot featurize an empty sentence".into()).into());
        }
        let key = (sentence.to_string(), image.to_string());
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }

        let text = self.embedder.embed_text(sentence)?.normalized()?;
        let image_half = {
            let mut cache = self.image_cache.lock().unwrap();
            match cache.get(image.to_string().as_str()) {
                Some(v) => v.clone(),
                None => {
                    let v = self.embedder.embed_image(image)?.normalized()?.values().to_vec();
                    cache.insert(image.to_string(), v.clone());
                    v
                }
            }
        };

        let mut values = text.values().to_vec();
        values.extend_from_slice(&image_half);
        let features = StateFeatures::new(values);
        self.cache.lock().unwrap().insert(key, features.clone());
        Ok(features)
    }
}

/// One row of the TD training set: current-state features, the reward of
/// the current state, and the next-state features (absent exactly when the
/// current sentence ended the response).
#[derive(Debug, Clone)]
pub struct TDSample {
    pub current: StateFeatures,
    pub reward: RewardScore,
    pub next: Option<StateFeatures>,
    pub terminal: bool,
}

impl TDSample {
    pub fn step(current: StateFeatures, reward: RewardScore, next: StateFeatures) -> Self {
        Self { current, reward, next: Some(next), terminal: false }
    }

    pub fn terminal(current: StateFeatures, reward: RewardScore) -> Self {
        Self { current, reward, next: None, terminal: true }
    }
}

/// Bootstrap target of one sample: `reward + gamma * v_next`, cut to the
/// bare reward at terminal states.
pub fn td_target(reward: f64, v_next: f64, terminal: bool, gamma: f64) -> f64 {
    if terminal {
        reward
    } else {
        reward + gamma * v_next
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    PlainSgd,
    AdaptiveMoment,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub shuffle_seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // Paper-scale defaults; desk-scale runs override freely.
        Self {
            gamma: 0.9,
            learning_rate: 5e-5,
            batch_size: 1024,
            epochs: 3,
            shuffle_seed: 0,
            optimizer: Optimizer::AdaptiveMoment,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ValueError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(ValueError::InvalidConfig(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.learning_rate <= 0.0 || self.learning_rate.is_nan() {
            return Err(ValueError::InvalidConfig("learning rate must be > 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(ValueError::InvalidConfig("batch size and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
}

/// The learnable scalar head. Tabular memorizes per-state values keyed by
/// feature content; the dense variants generalize across features. The
/// one-hidden-layer nonlinearity is tanh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "kebab-case")]
pub enum ValueHead {
    Tabular {
        #[serde(with = "table_serde")]
        table: BTreeMap<u64, f64>,
    },
    Linear {
        weights: Vec<f64>,
        bias: f64,
    },
    OneHiddenLayer {
        w1: Vec<Vec<f64>>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    },
}

impl ValueHead {
    pub fn new_tabular() -> Self {
        ValueHead::Tabular { table: BTreeMap::new() }
    }

    /// Zero bias, small symmetric-uniform weights from a fixed seed.
    pub fn new_linear(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x6c69_6e65)); // "line"
        let scale = 1.0 / (dim as f64).sqrt();
        ValueHead::Linear {
            weights: (0..dim).map(|_| rng.gen_range(-scale..scale)).collect(),
            bias: 0.0,
        }
    }

    pub fn new_one_hidden(dim: usize, hidden: usize, seed: u64) -> Self {
        assert!(hidden >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x6d6c_7031)); // "mlp1"
        let s1 = 1.0 / (dim as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        ValueHead::OneHiddenLayer {
            w1: (0..hidden)
                .map(|_| (0..dim).map(|_| rng.gen_range(-s1..s1)).collect())
                .collect(),
            b1: vec![0.0; hidden],
            w2: (0..hidden).map(|_| rng.gen_range(-s2..s2)).collect(),
            b2: 0.0,
        }
    }

    pub fn architecture(&self) -> &'static str {
        match self {
            ValueHead::Tabular { .. } => "tabular",
            ValueHead::Linear { .. } => "linear",
            ValueHead::OneHiddenLayer { .. } => "one-hidden-layer",
        }
    }

    /// Input dimension of dense heads; tabular accepts any.
    pub fn feature_dim(&self) -> Option<usize> {
        match self {
            ValueHead::Tabular { .. } => None,
            ValueHead::Linear { weights, .. } => Some(weights.len()),
            ValueHead::OneHiddenLayer { w1, .. } => Some(w1.first().map_or(0, Vec::len)),
        }
    }

    pub fn hidden_dim(&self) -> Option<usize> {
        match self {
            ValueHead::OneHiddenLayer { w1, .. } => Some(w1.len()),
            _ => None,
        }
    }

    fn check_shape(&self, features: &StateFeatures) -> Result<(), ValueError> {
        if let Some(expected) = self.feature_dim() {
            if features.dim() != expected {
                return Err(ValueError::ShapeMismatch { expected, got: features.dim() });
            }
        }
        Ok(())
    }

    /// Deterministic scalar value of a state.
    pub fn predict(&self, features: &StateFeatures) -> Result<f64, ValueError> {
        self.check_shape(features)?;
        Ok(match self {
            ValueHead::Tabular { table } => {
                table.get(&feature_key(features)).copied().unwrap_or(0.0)
            }
            ValueHead::Linear { weights, bias } => {
                dot(weights, features.values()) + bias
            }
            ValueHead::OneHiddenLayer { w1, b1, w2, b2 } => {
                let mut v = *b2;
                for ((row, b), w) in w1.iter().zip(b1).zip(w2) {
                    v += w * (dot(row, features.values()) + b).tanh();
                }
                v
            }
        })
    }

    /// Direct table access for tabular heads (test and oracle plumbing).
    pub fn tabular_entry(&self, features: &StateFeatures) -> Option<f64> {
        match self {
            ValueHead::Tabular { table } => table.get(&feature_key(features)).copied(),
            _ => None,
        }
    }

    pub fn set_tabular_entry(&mut self, features: &StateFeatures, value: f64) {
        if let ValueHead::Tabular { table } = self {
            table.insert(feature_key(features), value);
        }
    }

    // Dense parameter plumbing: a flat layout [weights.., bias] for linear,
    // [w1 rows.., b1.., w2.., b2] for the hidden head.
    fn flat_params(&self) -> Option<Vec<f64>> {
        match self {
            ValueHead::Tabular { .. } => None,
            ValueHead::Linear { weights, bias } => {
                let mut p = weights.clone();
                p.push(*bias);
                Some(p)
            }
            ValueHead::OneHiddenLayer { w1, b1, w2, b2 } => {
                let mut p: Vec<f64> = w1.iter().flatten().copied().collect();
                p.extend_from_slice(b1);
                p.extend_from_slice(w2);
                p.push(*b2);
                Some(p)
            }
        }
    }

    fn set_flat_params(&mut self, p: &[f64]) {
        match self {
            ValueHead::Tabular { .. } => {}
            ValueHead::Linear { weights, bias } => {
                let d = weights.len();
                weights.copy_from_slice(&p[..d]);
                *bias = p[d];
            }
            ValueHead::OneHiddenLayer { w1, b1, w2, b2 } => {
                let (h, d) = (w1.len(), w1[0].len());
                for (r, row) in w1.iter_mut().enumerate() {
                    row.copy_from_slice(&p[r * d..(r + 1) * d]);
                }
                b1.copy_from_slice(&p[h * d..h * d + h]);
                w2.copy_from_slice(&p[h * d + h..h * d + 2 * h]);
                *b2 = p[h * d + 2 * h];
            }
        }
    }

    /// Accumulates `coeff * d predict / d theta` into `out` (flat layout).
    fn grad_into(&self, x: &[f64], coeff: f64, out: &mut [f64]) {
        match self {
            ValueHead::Tabular { .. } => unreachable!("dense gradient on tabular head"),
            ValueHead::Linear { weights, .. } => {
                let d = weights.len();
                for (o, xi) in out[..d].iter_mut().zip(x) {
                    *o += coeff * xi;
                }
                out[d] += coeff;
            }
            ValueHead::OneHiddenLayer { w1, b1, w2, .. } => {
                let (h, d) = (w1.len(), w1[0].len());
                for j in 0..h {
                    let z = dot(&w1[j], x) + b1[j];
                    let a = z.tanh();
                    // value = sum_j w2[j] * tanh(z_j) + b2
                    out[h * d + h + j] += coeff * a; // d/d w2[j]
                    let dz = coeff * w2[j] * (1.0 - a * a);
                    for (o, xi) in out[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *o += dz * xi;
                    }
                    out[h * d + j] += dz; // d/d b1[j]
                }
                out[h * d + 2 * h] += coeff; // d/d b2
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// Tabular tables are keyed by u64 feature hashes; on disk they travel as
// (decimal-string, value) pairs so the internally-tagged head enum
// round-trips them cleanly.
mod table_serde {
    use super::BTreeMap;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(table: &BTreeMap<u64, f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<(String, f64)> = table.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<u64, f64>, D::Error> {
        let rows: Vec<(String, f64)> = Vec::deserialize(d)?;
        rows.into_iter()
            .map(|(k, v)| {
                k.parse::<u64>()
                    .map(|key| (key, v))
                    .map_err(|e| D::Error::custom(format!("bad table key {k:?}: {e}")))
            })
            .collect()
    }
}

enum AdamState {
    Dense { m: Vec<f64>, v: Vec<f64>, t: u64 },
    Sparse { m: HashMap<u64, f64>, v: HashMap<u64, f64>, t: u64 },
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Semi-gradient TD(0) over the dataset. Targets are computed with the
/// head as of the start of each batch and treated as constants; parameters
/// descend the mean squared TD error of the batch. Returns per-epoch loss
/// stats; aborts on a non-finite batch loss.
pub fn train(
    head: &mut ValueHead,
    dataset: &[TDSample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>, ValueError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(ValueError::EmptyDataset);
    }
    for s in dataset {
        head.check_shape(&s.current)?;
        if let Some(n) = &s.next {
            head.check_shape(n)?;
        }
        debug_assert_eq!(s.terminal, s.next.is_none());
    }

    // Tabular heads key on feature content; precompute the keys once.
    let keys: Option<Vec<(u64, Option<u64>)>> = match head {
        ValueHead::Tabular { .. } => Some(
            dataset
                .iter()
                .map(|s| (feature_key(&s.current), s.next.as_ref().map(feature_key)))
                .collect(),
        ),
        _ => None,
    };

    let mut adam = match (cfg.optimizer, head.flat_params()) {
        (Optimizer::AdaptiveMoment, Some(p)) => Some(AdamState::Dense {
            m: vec![0.0; p.len()],
            v: vec![0.0; p.len()],
            t: 0,
        }),
        (Optimizer::AdaptiveMoment, None) => Some(AdamState::Sparse {
            m: HashMap::new(),
            v: HashMap::new(),
            t: 0,
        }),
        (Optimizer::PlainSgd, _) => None,
    };

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut stats = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(splitmix64(cfg.shuffle_seed ^ (epoch as u64).wrapping_mul(0xA5A5_A5A5)));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let inv = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;

            match head {
                ValueHead::Tabular { table } => {
                    let keys = keys.as_ref().unwrap();
                    let mut grad: HashMap<u64, f64> = HashMap::new();
                    for &i in chunk {
                        let s = &dataset[i];
                        let (cur_key, next_key) = keys[i];
                        let v_next = next_key
                            .and_then(|k| table.get(&k).copied())
                            .unwrap_or(0.0);
                        let target = td_target(s.reward.value(), v_next, s.terminal, cfg.gamma);
                        let pred = table.get(&cur_key).copied().unwrap_or(0.0);
                        let residual = target - pred;
                        batch_loss += residual * residual * inv;
                        *grad.entry(cur_key).or_insert(0.0) += -2.0 * residual * inv;
                    }
                    if !batch_loss.is_finite() {
                        return Err(ValueError::NonFiniteLoss { epoch, batch: batches });
                    }
                    apply_sparse_step(table, &grad, cfg.learning_rate, adam.as_mut());
                }
                _ => {
                    let mut params = head.flat_params().unwrap();
                    let mut grad = vec![0.0; params.len()];
                    for &i in chunk {
                        let s = &dataset[i];
                        let v_next = match &s.next {
                            Some(nf) => head.predict(nf)?,
                            None => 0.0,
                        };
                        let target = td_target(s.reward.value(), v_next, s.terminal, cfg.gamma);
                        let pred = head.predict(&s.current)?;
                        let residual = target - pred;
                        batch_loss += residual * residual * inv;
                        head.grad_into(s.current.values(), -2.0 * residual * inv, &mut grad);
                    }
                    if !batch_loss.is_finite() {
                        return Err(ValueError::NonFiniteLoss { epoch, batch: batches });
                    }
                    apply_dense_step(&mut params, &grad, cfg.learning_rate, adam.as_mut());
                    head.set_flat_params(&params);
                }
            }

            loss_sum += batch_loss;
            batches += 1;
        }

        stats.push(EpochStats {
            epoch,
            mean_loss: loss_sum / batches as f64,
            batches,
        });
    }
    Ok(stats)
}

fn apply_dense_step(params: &mut [f64], grad: &[f64], lr: f64, adam: Option<&mut AdamState>) {
    match adam {
        None => {
            for (p, g) in params.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        Some(AdamState::Dense { m, v, t }) => {
            *t += 1;
            let bc1 = 1.0 - ADAM_B1.powi(*t as i32);
            let bc2 = 1.0 - ADAM_B2.powi(*t as i32);
            for i in 0..params.len() {
                m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * grad[i];
                v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * grad[i] * grad[i];
                params[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
            }
        }
        Some(AdamState::Sparse { .. }) => unreachable!("sparse optimizer on dense head"),
    }
}

fn apply_sparse_step(
    table: &mut BTreeMap<u64, f64>,
    grad: &HashMap<u64, f64>,
    lr: f64,
    adam: Option<&mut AdamState>,
) {
    match adam {
        None => {
            for (&key, &g) in grad {
                *table.entry(key).or_insert(0.0) -= lr * g;
            }
        }
        Some(AdamState::Sparse { m, v, t }) => {
            *t += 1;
            let bc1 = 1.0 - ADAM_B1.powi(*t as i32);
            let bc2 = 1.0 - ADAM_B2.powi(*t as i32);
            for (&key, &g) in grad {
                let me = m.entry(key).or_insert(0.0);
                *me = ADAM_B1 * *me + (1.0 - ADAM_B1) * g;
                let ve = v.entry(key).or_insert(0.0);
                *ve = ADAM_B2 * *ve + (1.0 - ADAM_B2) * g * g;
                *table.entry(key).or_insert(0.0) -= lr * (*me / bc1) / ((*ve / bc2).sqrt() + ADAM_EPS);
            }
        }
        Some(AdamState::Dense { .. }) => unreachable!("dense optimizer on tabular head"),
    }
}

/// Compares the analytic gradient of the squared TD error (target frozen)
/// against central finite differences with step 1e-5, returning the max
/// relative error over all parameters.
pub fn gradient_check(head: &ValueHead, sample: &TDSample, gamma: f64) -> Result<f64, ValueError> {
    if matches!(head, ValueHead::Tabular { .. }) {
        return Err(ValueError::TabularNotDifferentiable);
    }
    head.check_shape(&sample.current)?;

    let v_next = match &sample.next {
        Some(nf) => head.predict(nf)?,
        None => 0.0,
    };
    let target = td_target(sample.reward.value(), v_next, sample.terminal, gamma);

    let params = head.flat_params().unwrap();
    let pred = head.predict(&sample.current)?;
    let mut analytic = vec![0.0; params.len()];
    head.grad_into(sample.current.values(), -2.0 * (target - pred), &mut analytic);

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut probe = head.clone();
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus[i] += h;
        probe.set_flat_params(&plus);
        let lp = {
            let r = target - probe.predict(&sample.current)?;
            r * r
        };
        let mut minus = params.clone();
        minus[i] -= h;
        probe.set_flat_params(&minus);
        let lm = {
            let r = target - probe.predict(&sample.current)?;
            r * r
        };
        let numeric = (lp - lm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Norm of the analytic gradient of the squared TD error at `sample`.
pub fn gradient_norm(head: &ValueHead, sample: &TDSample, gamma: f64) -> Result<f64, ValueError> {
    if matches!(head, ValueHead::Tabular { .. }) {
        return Err(ValueError::TabularNotDifferentiable);
    }
    let v_next = match &sample.next {
        Some(nf) => head.predict(nf)?,
        None => 0.0,
    };
    let target = td_target(sample.reward.value(), v_next, sample.terminal, gamma);
    let pred = head.predict(&sample.current)?;
    let mut g = vec![0.0; head.flat_params().unwrap().len()];
    head.grad_into(sample.current.values(), -2.0 * (target - pred), &mut g);
    Ok(g.iter().map(|x| x * x).sum::<f64>().sqrt())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_FORMAT: &str = "farsight-value-head";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Discount used at training time.
    pub gamma: f64,
    pub feature_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub head: ValueHead,
}

/// Writes a versioned JSON checkpoint. f64 parameters survive the JSON
/// round trip bit-exactly (shortest round-trip float formatting).
pub fn save_checkpoint(
    head: &ValueHead,
    gamma: f64,
    metadata: BTreeMap<String, String>,
    path: &Path,
) -> Result<(), ValueError> {
    let file = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        gamma,
        feature_dim: head.feature_dim(),
        hidden_dim: head.hidden_dim(),
        metadata,
        head: head.clone(),
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| ValueError::Parse(e.to_string()))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ValueError> {
    let text = fs::read_to_string(path)?;
    let file: Checkpoint =
        serde_json::from_str(&text).map_err(|e| ValueError::Parse(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(ValueError::FormatMismatch { found: file.format });
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(ValueError::VersionMismatch {
            found: file.version,
            supported: CHECKPOINT_VERSION,
        });
    }
    Ok(file)
}
