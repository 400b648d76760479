//! Linear softmax head over {Face, Object}, trained with cross-entropy.
//!
//! Parameters are stored flat: `W` row-major as `d × 2` (feature `j`, class
//! `k` at `j * 2 + k`), followed by the two biases.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::FeatureMatrix;
use crate::dataset::Label;

pub const CLASSES: usize = 2;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("dimension mismatch: head has d = {expected}, input has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{rows} rows but {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    TrainingDiverged { epoch: usize, batch: usize },
    #[error("non-finite loss evaluating the head after epoch {epoch}")]
    EvaluationDiverged { epoch: usize },
    #[error("parameter shape mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, HeadError>;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    d: usize,
    params: Vec<f64>,
}

/// Numerically stable two-way softmax.
pub fn softmax(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// `ln(e^a + e^b)` without overflow.
fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl LinearHead {
    pub fn zeros(d: usize) -> Self {
        LinearHead { d, params: vec![0.0; d * CLASSES + CLASSES] }
    }

    /// Weights from U(-1, 1) / sqrt(d), bias zero.
    pub fn init_uniform(d: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (d.max(1) as f64).sqrt();
        let mut head = Self::zeros(d);
        for w in &mut head.params[..d * CLASSES] {
            *w = rng.random_range(-1.0..1.0) * scale;
        }
        head
    }

    pub fn from_parts(d: usize, w: Vec<f64>, b: [f64; 2]) -> Result<Self> {
        if w.len() != d * CLASSES {
            return Err(HeadError::ShapeMismatch(w.len(), d * CLASSES));
        }
        let mut params = w;
        params.extend_from_slice(&b);
        if params.iter().any(|v| !v.is_finite()) {
            return Err(HeadError::InvalidConfig("head parameters must be finite".into()));
        }
        Ok(LinearHead { d, params })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn weights(&self) -> &[f64] {
        &self.params[..self.d * CLASSES]
    }

    pub fn bias(&self) -> [f64; 2] {
        [self.params[self.d * CLASSES], self.params[self.d * CLASSES + 1]]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Exchanges the Face and Object output columns.
    pub fn swapped_columns(&self) -> Self {
        let mut out = self.clone();
        for pair in out.params.chunks_exact_mut(2) {
            pair.swap(0, 1);
        }
        out
    }

    pub fn logits<T: Copy + Into<f64>>(&self, x: &[T]) -> Result<[f64; 2]> {
        if x.len() != self.d {
            return Err(HeadError::DimensionMismatch { expected: self.d, got: x.len() });
        }
        let [mut z0, mut z1] = self.bias();
        for (w, &xj) in self.params.chunks_exact(2).zip(x) {
            let xj: f64 = xj.into();
            z0 += w[0] * xj;
            z1 += w[1] * xj;
        }
        Ok([z0, z1])
    }

    /// `(p_face, p_object)`.
    pub fn forward<T: Copy + Into<f64>>(&self, x: &[T]) -> Result<[f64; 2]> {
        Ok(softmax(self.logits(x)?))
    }

    /// Face iff `p_face > 0.5`; exact ties go to Object.
    pub fn predict<T: Copy + Into<f64>>(&self, x: &[T]) -> Result<Label> {
        let p = self.forward(x)?;
        Ok(if p[0] > 0.5 { Label::Face } else { Label::Object })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Same flat layout as the head parameters.
    pub params: Vec<f64>,
}

/// Mean cross-entropy over the batch and its analytic gradient.
pub fn loss_and_grad<T, R>(head: &LinearHead, rows: &[R], labels: &[Label]) -> Result<(f64, Gradients)>
where
    T: Copy + Into<f64>,
    R: AsRef<[T]>,
{
    if rows.is_empty() {
        return Err(HeadError::EmptyBatch);
    }
    if rows.len() != labels.len() {
        return Err(HeadError::LabelCount { rows: rows.len(), labels: labels.len() });
    }
    let d = head.d;
    let n = rows.len() as f64;
    let mut grad = vec![0.0; head.params.len()];
    let mut loss = 0.0;
    for (row, &label) in rows.iter().zip(labels) {
        let x = row.as_ref();
        let z = head.logits(x)?;
        let k = label.index();
        loss += log_sum_exp(z[0], z[1]) - z[k];
        let p = softmax(z);
        let dz = [p[0] - (k == 0) as u8 as f64, p[1] - (k == 1) as u8 as f64];
        for (g, &xj) in grad.chunks_exact_mut(2).zip(x) {
            let xj: f64 = xj.into();
            g[0] += dz[0] * xj;
            g[1] += dz[1] * xj;
        }
        grad[d * 2] += dz[0];
        grad[d * 2 + 1] += dz[1];
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(HeadError::NonFiniteLoss);
    }
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss, Gradients { params: grad }))
}

/// Accuracy (argmax rule) and mean cross-entropy.
pub fn evaluate<T, R>(head: &LinearHead, rows: &[R], labels: &[Label]) -> Result<(f64, f64)>
where
    T: Copy + Into<f64>,
    R: AsRef<[T]>,
{
    let (loss, _) = loss_and_grad(head, rows, labels)?;
    let mut correct = 0usize;
    for (row, &label) in rows.iter().zip(labels) {
        correct += (head.predict(row.as_ref())? == label) as usize;
    }
    Ok((correct as f64 / rows.len() as f64, loss))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(HeadError::InvalidConfig(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState { m: vec![0.0; n_params], v: vec![0.0; n_params], step_count: 0 }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_update(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(HeadError::ShapeMismatch(params.len(), grads.len()));
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let c1 = 1.0 - cfg.beta1.powf(t);
    let c2 = 1.0 - cfg.beta2.powf(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

pub fn adam_step(head: &mut LinearHead, state: &mut AdamState, cfg: &AdamConfig, grads: &Gradients) -> Result<()> {
    adam_update(&mut head.params, &grads.params, state, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam(AdamConfig),
    /// Plain gradient descent; only used for sanity checks.
    Sgd {
        learning_rate: f64,
    },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam(AdamConfig::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 40, batch_size: 64, optimizer: Optimizer::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(HeadError::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        match self.optimizer {
            Optimizer::Adam(a) => a.validate(),
            Optimizer::Sgd { learning_rate } if learning_rate > 0.0 => Ok(()),
            Optimizer::Sgd { .. } => Err(HeadError::InvalidConfig("learning rate must be positive".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_acc: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Zero-based index into `epochs`.
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub final_val_acc: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
    pub config: TrainConfig,
}

fn check_dims(head_d: usize, fm: &FeatureMatrix, labels: &[Label]) -> Result<()> {
    if fm.cols() != head_d {
        return Err(HeadError::DimensionMismatch { expected: head_d, got: fm.cols() });
    }
    if fm.rows() != labels.len() {
        return Err(HeadError::LabelCount { rows: fm.rows(), labels: labels.len() });
    }
    if fm.rows() == 0 {
        return Err(HeadError::EmptyBatch);
    }
    Ok(())
}

/// Mini-batch training with a per-epoch seeded shuffle. Returns the head
/// snapshot from the epoch with the highest validation accuracy (earliest
/// on ties).
pub fn train(
    config: &TrainConfig,
    train_fm: &FeatureMatrix,
    train_labels: &[Label],
    val_fm: &FeatureMatrix,
    val_labels: &[Label],
    seed: u64,
) -> Result<(LinearHead, TrainReport)> {
    config.validate()?;
    let d = train_fm.cols();
    check_dims(d, train_fm, train_labels)?;
    check_dims(d, val_fm, val_labels)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = LinearHead::init_uniform(d, &mut rng);
    let mut adam = AdamState::new(head.params.len());
    let train_rows: Vec<&[f32]> = train_fm.row_iter().collect();
    let val_rows: Vec<&[f32]> = val_fm.row_iter().collect();
    let mut order: Vec<usize> = (0..train_rows.len()).collect();

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, LinearHead)> = None;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let rows: Vec<&[f32]> = chunk.iter().map(|&i| train_rows[i]).collect();
            let labels: Vec<Label> = chunk.iter().map(|&i| train_labels[i]).collect();
            let (_, grads) = loss_and_grad(&head, &rows, &labels).map_err(|e| match e {
                HeadError::NonFiniteLoss => HeadError::TrainingDiverged { epoch, batch: bi },
                other => other,
            })?;
            match &config.optimizer {
                Optimizer::Adam(cfg) => adam_step(&mut head, &mut adam, cfg, &grads)?,
                Optimizer::Sgd { learning_rate } => {
                    head.params.iter_mut().zip(&grads.params).for_each(|(p, g)| *p -= learning_rate * g)
                }
            }
            if head.params.iter().any(|p| !p.is_finite()) {
                return Err(HeadError::TrainingDiverged { epoch, batch: bi });
            }
        }
        let diverged = |_| HeadError::EvaluationDiverged { epoch };
        let (train_acc, train_loss) = evaluate(&head, &train_rows, train_labels).map_err(diverged)?;
        let (val_acc, val_loss) = evaluate(&head, &val_rows, val_labels).map_err(diverged)?;
        epochs.push(EpochStats { epoch, train_acc, train_loss, val_acc, val_loss });
        if best.as_ref().is_none_or(|(_, acc, _)| val_acc > *acc) {
            best = Some((epoch, val_acc, head.clone()));
        }
    }
    let (best_epoch, best_val_acc, best_head) = best.expect("at least one epoch");
    let report = TrainReport {
        final_val_acc: epochs.last().map(|e| e.val_acc).unwrap_or(f64::NAN),
        epochs,
        best_epoch,
        best_val_acc,
        n_train: train_fm.rows(),
        n_val: val_fm.rows(),
        seed,
        config: *config,
    };
    Ok((best_head, report))
}

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"PPHD1\n";

/// Header `PPHD1\n`, u32 d, u32 classes, `W` and `b` as f64 LE, then a
/// u32-length-prefixed UTF-8 JSON footer.
pub fn encode_checkpoint(head: &LinearHead, footer: &serde_json::Value) -> Vec<u8> {
    let text = serde_json::to_string(footer).expect("JSON values always serialize");
    let mut out = Vec::with_capacity(14 + head.params.len() * 8 + 4 + text.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(head.d as u32).to_le_bytes());
    out.extend_from_slice(&(CLASSES as u32).to_le_bytes());
    for p in &head.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(LinearHead, serde_json::Value)> {
    let bad = |message: &str| HeadError::Checkpoint { path: path.display().to_string(), message: message.into() };
    if bytes.len() < 14 || &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic or unsupported version"));
    }
    let u32_at = |pos: usize| u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
    let d = u32_at(6);
    if u32_at(10) != CLASSES {
        return Err(bad("only two-class heads are supported"));
    }
    let n = d * CLASSES + CLASSES;
    let body_end = 14 + n * 8;
    if bytes.len() < body_end + 4 {
        return Err(bad("truncated parameters"));
    }
    let params: Vec<f64> =
        bytes[14..body_end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let footer_len = u32_at(body_end);
    let footer =
        bytes.get(body_end + 4..).filter(|f| f.len() == footer_len).ok_or_else(|| bad("footer length mismatch"))?;
    let footer = serde_json::from_slice(footer).map_err(|e| bad(&format!("footer: {e}")))?;
    let b = [params[d * 2], params[d * 2 + 1]];
    let head = LinearHead::from_parts(d, params[..d * 2].to_vec(), b).map_err(|_| bad("non-finite parameters"))?;
    Ok((head, footer))
}

pub fn write_checkpoint(path: &Path, head: &LinearHead, footer: &serde_json::Value) -> Result<()> {
    std::fs::write(path, encode_checkpoint(head, footer))
        .map_err(|source| HeadError::Io { path: path.display().to_string(), source })
}

pub fn read_checkpoint(path: &Path) -> Result<(LinearHead, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|source| HeadError::Io { path: path.display().to_string(), source })?;
    decode_checkpoint(&bytes, path)
}

/// Two well-separated Gaussian blobs in 2-D.
pub mod toy {
    use super::*;
    use crate::dataset::Orientation;
    use rand_distr::{Distribution, Normal};

    pub const CENTER: f64 = 2.0;
    pub const SPREAD: f64 = 0.5;
    /// Learning rate for the toy. The default 1e-4 cannot move a random
    /// 1/sqrt(2)-scaled initialization across the boundary in 160 steps.
    pub const LEARNING_RATE: f64 = 1e-2;

    pub struct Toy {
        pub train: FeatureMatrix,
        pub train_labels: Vec<Label>,
        pub val: FeatureMatrix,
        pub val_labels: Vec<Label>,
    }

    fn blobs(rng: &mut ChaCha8Rng, per_class: usize, prefix: &str) -> (FeatureMatrix, Vec<Label>) {
        let noise = Normal::new(0.0, SPREAD).expect("valid normal");
        let mut values = Vec::with_capacity(per_class * 4);
        let mut labels = Vec::with_capacity(per_class * 2);
        for i in 0..per_class * 2 {
            let label = if i % 2 == 0 { Label::Face } else { Label::Object };
            let c = if label == Label::Face { CENTER } else { -CENTER };
            values.push((c + noise.sample(rng)) as f32);
            values.push((c + noise.sample(rng)) as f32);
            labels.push(label);
        }
        let ids = (0..labels.len()).map(|i| format!("{prefix}{i:03}")).collect();
        let fm = FeatureMatrix::new(2, values, ids, "0".repeat(32), Orientation::Upright).expect("finite toy");
        (fm, labels)
    }

    pub fn separable_toy(seed: u64, per_class: usize) -> Toy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (train, train_labels) = blobs(&mut rng, per_class, "t");
        let (val, val_labels) = blobs(&mut rng, per_class, "v");
        Toy { train, train_labels, val, val_labels }
    }

    /// Closed-form separator `x + y = 0`: true when every point lies on its
    /// class's side.
    pub fn is_separated(fm: &FeatureMatrix, labels: &[Label]) -> bool {
        fm.row_iter().zip(labels).all(|(r, &l)| {
            let s = r[0] as f64 + r[1] as f64;
            if l == Label::Face {
                s > 0.0
            } else {
                s < 0.0
            }
        })
    }

    pub fn config() -> TrainConfig {
        TrainConfig {
            optimizer: Optimizer::Adam(AdamConfig { learning_rate: LEARNING_RATE, ..AdamConfig::default() }),
            ..TrainConfig::default()
        }
    }
}
