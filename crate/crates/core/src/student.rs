//! The attacker's local model: a multinomial logistic regression over
//! sentence embeddings, trained on the victim's hard labels.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Embedding, HttpConfig, InferenceBackend};
use crate::corpus::SentenceLookup;
use crate::error::{Error, Result};
use crate::hash::fnv1a;
use crate::http::JsonClient;

pub const MODEL_MAGIC: &[u8; 8] = b"MQSTU1\0\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub query_id: u64,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 10,
            learning_rate: 0.1,
            weight_decay: 1e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidValue("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidValue("batch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn digest(&self, num_classes: usize, dim: usize) -> u64 {
        let canon = format!(
            "linear-probe|classes={num_classes}|dim={dim}|epochs={}|lr={:e}|wd={:e}|batch={}|seed={}",
            self.epochs, self.learning_rate, self.weight_decay, self.batch_size, self.seed
        );
        fnv1a(canon.as_bytes())
    }
}

/// Linear softmax classifier, `num_classes x dim` weights plus a bias per class.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    num_classes: usize,
    dim: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
    trained_on: usize,
    config_digest: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub probabilities: Vec<f64>,
}

impl StudentModel {
    pub fn from_parts(
        num_classes: usize,
        dim: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
        config_digest: u64,
    ) -> Result<Self> {
        if weights.len() != num_classes * dim {
            return Err(Error::Shape {
                expected: num_classes * dim,
                found: weights.len(),
            });
        }
        if bias.len() != num_classes {
            return Err(Error::Shape {
                expected: num_classes,
                found: bias.len(),
            });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("model parameters must be finite".into()));
        }
        Ok(StudentModel {
            num_classes,
            dim,
            weights,
            bias,
            trained_on: 0,
            config_digest,
        })
    }

    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        StudentModel {
            num_classes,
            dim,
            weights: vec![0.0; num_classes * dim],
            bias: vec![0.0; num_classes],
            trained_on: 0,
            config_digest: 0,
        }
    }

    /// Predicts `label` for every input. Used when the collected labels hold a
    /// single class and there is nothing to fit.
    pub fn constant(label: usize, num_classes: usize, dim: usize, trained_on: usize) -> Self {
        let mut m = Self::zeros(num_classes, dim);
        m.bias[label] = 1.0;
        m.trained_on = trained_on;
        m
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn trained_on(&self) -> usize {
        self.trained_on
    }

    pub fn config_digest(&self) -> u64 {
        self.config_digest
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.num_classes)
            .map(|c| {
                let row = &self.weights[c * self.dim..(c + 1) * self.dim];
                f64::from(self.bias[c]) + row.iter().zip(x).map(|(w, v)| f64::from(*w) * v).sum::<f64>()
            })
            .collect()
    }

    pub fn predict(&self, embedding: &Embedding) -> Result<Prediction> {
        if embedding.dim() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                found: embedding.dim(),
            });
        }
        let probabilities = softmax(&self.logits(&embedding.to_f64()));
        Ok(Prediction {
            label: argmax(&probabilities),
            probabilities,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * (self.weights.len() + self.bias.len()));
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in self.weights.iter().chain(&self.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.config_digest.to_le_bytes());
        out
    }

    /// `trained_on` is not part of the file format and reads back as zero.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::format("student model", m);
        if bytes.len() < 16 || &bytes[..8] != MODEL_MAGIC {
            return Err(bad("missing MQSTU1 header".into()));
        }
        let classes = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let n_params = classes * dim + classes;
        let expected = 16 + 4 * n_params + 8;
        if bytes.len() != expected {
            return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let floats: Vec<f32> = bytes[16..16 + 4 * n_params]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let digest = u64::from_le_bytes(bytes[expected - 8..].try_into().unwrap());
        let (w, b) = floats.split_at(classes * dim);
        Self::from_parts(classes, dim, w.to_vec(), b.to_vec(), digest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy over `rows` plus `weight_decay / 2 * ||W||^2`, and its
/// gradient. `params` holds the row-major weights followed by the biases.
pub fn objective(
    params: &[f64],
    xs: &[Vec<f64>],
    ys: &[usize],
    rows: &[usize],
    num_classes: usize,
    weight_decay: f64,
) -> (f64, Vec<f64>) {
    let dim = xs.first().map_or(0, Vec::len);
    let n_w = num_classes * dim;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let inv_n = 1.0 / rows.len() as f64;
    let mut logits = vec![0.0; num_classes];
    for &r in rows {
        let x = &xs[r];
        for (c, z) in logits.iter_mut().enumerate() {
            let w = &params[c * dim..(c + 1) * dim];
            *z = params[n_w + c] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += (lse - logits[ys[r]]) * inv_n;
        for c in 0..num_classes {
            let p = (logits[c] - lse).exp();
            let g = (p - if c == ys[r] { 1.0 } else { 0.0 }) * inv_n;
            for (gw, xv) in grad[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                *gw += g * xv;
            }
            grad[n_w + c] += g;
        }
    }
    let sq: f64 = params[..n_w].iter().map(|w| w * w).sum();
    loss += 0.5 * weight_decay * sq;
    for (g, w) in grad[..n_w].iter_mut().zip(&params[..n_w]) {
        *g += weight_decay * w;
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: StudentModel,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Seeded mini-batch gradient descent from all-zero parameters.
pub fn train_on_embeddings(
    xs: &[Embedding],
    ys: &[usize],
    num_classes: usize,
    hyper: &TrainHyper,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    if xs.len() != ys.len() {
        return Err(Error::Shape {
            expected: xs.len(),
            found: ys.len(),
        });
    }
    if num_classes < 2 {
        return Err(Error::InvalidValue("need at least two classes".into()));
    }
    if let Some(bad) = ys.iter().find(|&&y| y >= num_classes) {
        return Err(Error::InvalidValue(format!(
            "label {bad} >= {num_classes} classes"
        )));
    }
    let mut distinct = ys.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::DegenerateTraining(format!(
            "{} examples cover {} distinct label(s)",
            ys.len(),
            distinct.len()
        )));
    }
    let dim = xs[0].dim();
    if let Some(e) = xs.iter().find(|e| e.dim() != dim) {
        return Err(Error::Shape {
            expected: dim,
            found: e.dim(),
        });
    }
    let data: Vec<Vec<f64>> = xs.iter().map(Embedding::to_f64).collect();
    let all: Vec<usize> = (0..data.len()).collect();
    let mut params = vec![0.0; num_classes * dim + num_classes];
    let (initial_loss, _) = objective(&params, &data, ys, &all, num_classes, hyper.weight_decay);

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order = all.clone();
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            let (loss, grad) = objective(&params, &data, ys, batch, num_classes, hyper.weight_decay);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NumericalDivergence { step });
            }
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= hyper.learning_rate * g;
            }
            step += 1;
        }
        let (loss, _) = objective(&params, &data, ys, &all, num_classes, hyper.weight_decay);
        if !loss.is_finite() {
            return Err(Error::NumericalDivergence { step });
        }
        epoch_losses.push(loss);
    }
    let final_loss = *epoch_losses.last().unwrap();
    let n_w = num_classes * dim;
    let mut model = StudentModel::from_parts(
        num_classes,
        dim,
        params[..n_w].iter().map(|&v| v as f32).collect(),
        params[n_w..].iter().map(|&v| v as f32).collect(),
        hyper.digest(num_classes, dim),
    )
    .map_err(|_| Error::NumericalDivergence { step })?;
    model.trained_on = ys.len();
    Ok(TrainOutcome {
        model,
        initial_loss,
        final_loss,
        epoch_losses,
    })
}

/// Embed the queries behind `pairs` and fit a student to their labels.
pub fn train_student<L: SentenceLookup + ?Sized>(
    pairs: &[LabeledPair],
    lookup: &L,
    backend: &dyn InferenceBackend,
    num_classes: usize,
    hyper: &TrainHyper,
) -> Result<StudentModel> {
    if pairs.is_empty() {
        return Err(Error::DegenerateTraining("no labeled pairs".into()));
    }
    let sentences = pairs
        .iter()
        .map(|p| lookup.sentence(p.query_id))
        .collect::<Result<Vec<_>>>()?;
    let xs = backend.embed_batch(&sentences)?;
    let ys: Vec<usize> = pairs.iter().map(|p| p.label).collect();
    Ok(train_on_embeddings(&xs, &ys, num_classes, hyper)?.model)
}

/// Like [`train_student`], but a single observed class yields a constant
/// predictor instead of an error.
pub fn train_or_constant<L: SentenceLookup + ?Sized>(
    pairs: &[LabeledPair],
    lookup: &L,
    backend: &dyn InferenceBackend,
    num_classes: usize,
    hyper: &TrainHyper,
) -> Result<StudentModel> {
    match train_student(pairs, lookup, backend, num_classes, hyper) {
        Err(Error::DegenerateTraining(_)) if !pairs.is_empty() => {
            let dim = backend.embed(lookup.sentence(pairs[0].query_id)?)?.dim();
            Ok(StudentModel::constant(
                pairs[0].label,
                num_classes,
                dim,
                pairs.len(),
            ))
        }
        other => other,
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainPair {
    pub text: String,
    pub label: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainRequest {
    pub pairs: Vec<TrainPair>,
    pub hyper: TrainHyper,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainResponse {
    pub model_id: String,
}

/// Hands training off to the sidecar's `/train` endpoint. The returned
/// model id addresses the trained model through `/classify`.
#[derive(Debug)]
pub struct ExternalTrainer {
    client: JsonClient,
}

impl ExternalTrainer {
    pub fn new(config: HttpConfig) -> Self {
        ExternalTrainer {
            client: JsonClient::new(config),
        }
    }

    pub fn train<L: SentenceLookup + ?Sized>(
        &self,
        pairs: &[LabeledPair],
        lookup: &L,
        hyper: &TrainHyper,
    ) -> Result<String> {
        hyper.validate()?;
        let pairs = pairs
            .iter()
            .map(|p| {
                Ok(TrainPair {
                    text: lookup.sentence(p.query_id)?.text.clone(),
                    label: p.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let resp: TrainResponse = self
            .client
            .post("/train", &TrainRequest { pairs, hyper: *hyper })?;
        Ok(resp.model_id)
    }
}
