//! Desk-scale sentiment classifier used as the gradient source.
//!
//! Architecture: mean-pool the sentence embeddings and the aspect embeddings,
//! concatenate, one `tanh` hidden layer, linear output, softmax over the three
//! polarities. Gradients are hand-derived backpropagation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{encode, ClassCounts, Dataset, EncodedSample, Polarity, Sample, Vocab};

pub const NUM_CLASSES: usize = 3;
/// Probabilities are clamped to this before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error("class {0} is absent from the training data")]
    MissingClass(Polarity),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub l2_penalty: f64,
    /// Embedding width.
    pub dim: usize,
    /// Hidden layer width.
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1.5,
            seed: 1,
            l2_penalty: 1e-5,
            dim: 64,
            hidden: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return bad("l2_penalty must be >= 0");
        }
        if self.dim == 0 || self.hidden == 0 {
            return bad("dim and hidden must be >= 1");
        }
        Ok(())
    }
}

/// Row-major parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub vocab_size: usize,
    pub dim: usize,
    pub hidden: usize,
    /// `[vocab_size × dim]`
    pub embedding: Vec<f64>,
    /// `[2·dim × hidden]`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[hidden × 3]`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(vocab_size: usize, dim: usize, hidden: usize) -> Self {
        Self {
            vocab_size,
            dim,
            hidden,
            embedding: vec![0.0; vocab_size * dim],
            w1: vec![0.0; 2 * dim * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * NUM_CLASSES],
            b2: vec![0.0; NUM_CLASSES],
        }
    }

    /// Uniform(-0.1, 0.1) initialization from ChaCha8 seeded with `seed`.
    pub fn init(vocab_size: usize, dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(vocab_size, dim, hidden, &mut rng)
    }

    fn init_with<R: Rng>(vocab_size: usize, dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(vocab_size, dim, hidden);
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
        p
    }

    pub fn embedding_row(&self, id: usize) -> &[f64] {
        &self.embedding[id * self.dim..(id + 1) * self.dim]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.embedding,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn tensors(&self) -> [&Vec<f64>; 5] {
        [&self.embedding, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_shapes(&self) -> Result<(), ModelError> {
        let (d, h) = (self.dim, self.hidden);
        let ok = d >= 1
            && h >= 1
            && self.embedding.len() == self.vocab_size * d
            && self.w1.len() == 2 * d * h
            && self.b1.len() == h
            && self.w2.len() == h * NUM_CLASSES
            && self.b2.len() == NUM_CLASSES;
        if ok {
            Ok(())
        } else {
            Err(ModelError::Dimension("inconsistent parameter shapes".into()))
        }
    }
}

/// Continuous input: one `dim`-vector per sentence token and per aspect token
/// after the separator. The separator itself carries no vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedInput {
    pub sentence: Vec<Vec<f64>>,
    pub aspect: Vec<Vec<f64>>,
}

impl EmbeddedInput {
    /// Iterates over sentence vectors, then aspect vectors.
    pub fn vectors(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.sentence.iter().chain(self.aspect.iter())
    }
}

pub fn embed(params: &ModelParams, encoded: &EncodedSample) -> EmbeddedInput {
    let row = |&id: &usize| params.embedding_row(id).to_vec();
    EmbeddedInput {
        sentence: encoded.sentence_ids().iter().map(row).collect(),
        aspect: encoded.aspect_ids().iter().map(row).collect(),
    }
}

/// Gradient with the same layout as [`EmbeddedInput`].
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradient {
    pub sentence: Vec<Vec<f64>>,
    pub aspect: Vec<Vec<f64>>,
}

struct Activations {
    /// `concat(mean(sentence), mean(aspect))`
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    probs: [f64; NUM_CLASSES],
}

fn mean_pool(vecs: &[Vec<f64>], dim: usize, out: &mut [f64]) -> Result<(), ModelError> {
    if vecs.is_empty() {
        return Err(ModelError::Dimension("empty token sequence".into()));
    }
    for v in vecs {
        if v.len() != dim {
            return Err(ModelError::Dimension(format!(
                "vector of length {} where {dim} expected",
                v.len()
            )));
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    let n = vecs.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(())
}

fn softmax(logits: [f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.map(|l| (l - max).exp());
    let sum: f64 = exps.iter().sum();
    exps.map(|e| e / sum)
}

fn activations(params: &ModelParams, input: &EmbeddedInput) -> Result<Activations, ModelError> {
    params.check_shapes()?;
    let (d, h) = (params.dim, params.hidden);
    let mut pooled = vec![0.0; 2 * d];
    mean_pool(&input.sentence, d, &mut pooled[..d])?;
    mean_pool(&input.aspect, d, &mut pooled[d..])?;

    let mut hidden = params.b1.clone();
    for (i, z) in pooled.iter().enumerate() {
        let row = &params.w1[i * h..(i + 1) * h];
        for (acc, w) in hidden.iter_mut().zip(row) {
            *acc += z * w;
        }
    }
    hidden.iter_mut().for_each(|v| *v = v.tanh());

    let mut logits = [0.0; NUM_CLASSES];
    logits.copy_from_slice(&params.b2);
    for (k, hk) in hidden.iter().enumerate() {
        for (c, l) in logits.iter_mut().enumerate() {
            *l += hk * params.w2[k * NUM_CLASSES + c];
        }
    }
    Ok(Activations {
        pooled,
        hidden,
        probs: softmax(logits),
    })
}

/// Class probabilities `M(x)`.
pub fn forward(params: &ModelParams, input: &EmbeddedInput) -> Result<[f64; NUM_CLASSES], ModelError> {
    activations(params, input).map(|a| a.probs)
}

/// Backpropagates `d_logits` to the pooled vector. Returns `d_pooled` and
/// `d_preactivation` for the hidden layer.
fn backprop_to_pooled(params: &ModelParams, act: &Activations, d_logits: &[f64; NUM_CLASSES]) -> (Vec<f64>, Vec<f64>) {
    let h = params.hidden;
    let d_pre: Vec<f64> = (0..h)
        .map(|k| {
            let dh: f64 = (0..NUM_CLASSES)
                .map(|c| params.w2[k * NUM_CLASSES + c] * d_logits[c])
                .sum();
            dh * (1.0 - act.hidden[k] * act.hidden[k])
        })
        .collect();
    let d_pooled = (0..2 * params.dim)
        .map(|i| {
            params.w1[i * h..(i + 1) * h]
                .iter()
                .zip(&d_pre)
                .map(|(w, g)| w * g)
                .sum()
        })
        .collect();
    (d_pooled, d_pre)
}

/// `∂ M(x)[class] / ∂ x` for every sentence and aspect vector.
pub fn grad_wrt_input(
    params: &ModelParams,
    input: &EmbeddedInput,
    class: Polarity,
) -> Result<InputGradient, ModelError> {
    let act = activations(params, input)?;
    let y = class.index();
    let py = act.probs[y];
    let mut d_logits = [0.0; NUM_CLASSES];
    for (c, g) in d_logits.iter_mut().enumerate() {
        let delta = if c == y { 1.0 } else { 0.0 };
        *g = py * (delta - act.probs[c]);
    }
    let (d_pooled, _) = backprop_to_pooled(params, &act, &d_logits);
    let d = params.dim;
    let ns = input.sentence.len() as f64;
    let na = input.aspect.len() as f64;
    let s_grad: Vec<f64> = d_pooled[..d].iter().map(|g| g / ns).collect();
    let a_grad: Vec<f64> = d_pooled[d..].iter().map(|g| g / na).collect();
    Ok(InputGradient {
        sentence: vec![s_grad; input.sentence.len()],
        aspect: vec![a_grad; input.aspect.len()],
    })
}

/// Per-class weights `1 - n_c / Σ n`. All ones when the batch is empty.
pub fn balanced_weights(counts: [usize; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return [1.0; NUM_CLASSES];
    }
    counts.map(|n| 1.0 - n as f64 / total as f64)
}

/// Class-balanced cross entropy averaged over the batch.
pub fn balanced_ce(probs: &[[f64; NUM_CLASSES]], labels: &[Polarity], counts: [usize; NUM_CLASSES]) -> f64 {
    assert_eq!(probs.len(), labels.len(), "probs/labels length mismatch");
    if probs.is_empty() {
        return 0.0;
    }
    let w = balanced_weights(counts);
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, y)| w[y.index()] * -p[y.index()].max(LOG_CLAMP).ln())
        .sum();
    total / probs.len() as f64
}

/// Mean unweighted cross entropy; used to check the balanced loss.
pub fn mean_ce(probs: &[[f64; NUM_CLASSES]], labels: &[Polarity]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, y)| -p[y.index()].max(LOG_CLAMP).ln())
        .sum();
    total / probs.len() as f64
}

pub fn predict(params: &ModelParams, vocab: &Vocab, sample: &Sample) -> Result<[f64; NUM_CLASSES], ModelError> {
    forward(params, &embed(params, &encode(sample, vocab)))
}

pub fn argmax(probs: &[f64; NUM_CLASSES]) -> Polarity {
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if probs[c] > probs[best] {
            best = c;
        }
    }
    Polarity::ALL[best]
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean batch loss per epoch.
    pub loss_history: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.loss_history.last().copied().unwrap_or(f64::NAN)
    }
}

/// Minibatch gradient descent on the balanced cross entropy. The result is a
/// pure function of the inputs: both initialization and shuffling draw from a
/// single ChaCha8 stream seeded with `config.seed`.
pub fn train(dataset: &Dataset, vocab: &Vocab, config: &TrainConfig) -> Result<TrainOutcome, ModelError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let counts = ClassCounts::from_labels(dataset.samples.iter().map(|s| s.label));
    if let Some(p) = Polarity::ALL.into_iter().find(|p| counts.get(*p) == 0) {
        return Err(ModelError::MissingClass(p));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init_with(vocab.len(), config.dim, config.hidden, &mut rng);
    let encoded: Vec<EncodedSample> = dataset.samples.iter().map(|s| encode(s, vocab)).collect();
    let labels: Vec<Polarity> = dataset.samples.iter().map(|s| s.label).collect();
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut grads = ModelParams::zeros(vocab.len(), config.dim, config.hidden);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let loss = batch_step(&mut params, &mut grads, &encoded, &labels, batch, config)?;
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch, batch: b });
            }
            epoch_loss += loss;
            n_batches += 1;
        }
        history.push(epoch_loss / n_batches as f64);
        log::debug!("epoch {epoch}: loss {:.6}", history[epoch]);
    }
    if !params.is_finite() {
        return Err(ModelError::NonFiniteLoss {
            epoch: config.epochs,
            batch: 0,
        });
    }
    Ok(TrainOutcome {
        params,
        loss_history: history,
    })
}

fn batch_step(
    params: &mut ModelParams,
    grads: &mut ModelParams,
    encoded: &[EncodedSample],
    labels: &[Polarity],
    batch: &[usize],
    config: &TrainConfig,
) -> Result<f64, ModelError> {
    for t in grads.tensors_mut() {
        t.iter_mut().for_each(|v| *v = 0.0);
    }
    let counts = ClassCounts::from_labels(batch.iter().map(|&i| labels[i])).as_array();
    let weights = balanced_weights(counts);
    let bsz = batch.len() as f64;
    let (d, h) = (params.dim, params.hidden);
    let mut loss = 0.0;

    for &i in batch {
        let enc = &encoded[i];
        let y = labels[i].index();
        let act = activations(params, &embed(params, enc))?;
        let w = weights[y];
        loss += w * -act.probs[y].max(LOG_CLAMP).ln();

        let mut d_logits = act.probs;
        d_logits[y] -= 1.0;
        d_logits.iter_mut().for_each(|g| *g *= w / bsz);

        for c in 0..NUM_CLASSES {
            grads.b2[c] += d_logits[c];
            for k in 0..h {
                grads.w2[k * NUM_CLASSES + c] += act.hidden[k] * d_logits[c];
            }
        }
        let (d_pooled, d_pre) = backprop_to_pooled(params, &act, &d_logits);
        for k in 0..h {
            grads.b1[k] += d_pre[k];
        }
        for (j, z) in act.pooled.iter().enumerate() {
            let row = &mut grads.w1[j * h..(j + 1) * h];
            for (g, dp) in row.iter_mut().zip(&d_pre) {
                *g += z * dp;
            }
        }
        let ns = enc.sentence_len as f64;
        for &id in enc.sentence_ids() {
            let row = &mut grads.embedding[id * d..(id + 1) * d];
            for (g, dz) in row.iter_mut().zip(&d_pooled[..d]) {
                *g += dz / ns;
            }
        }
        let na = enc.aspect_ids().len() as f64;
        for &id in enc.aspect_ids() {
            let row = &mut grads.embedding[id * d..(id + 1) * d];
            for (g, dz) in row.iter_mut().zip(&d_pooled[d..]) {
                *g += dz / na;
            }
        }
    }

    let lr = config.learning_rate;
    let l2 = config.l2_penalty;
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        for (pv, gv) in p.iter_mut().zip(g.iter()) {
            *pv -= lr * (gv + l2 * *pv);
        }
    }
    Ok(loss / bsz)
}

// ---------------------------------------------------------------------------
// Checkpoints

const MAGIC: &[u8; 4] = b"ACDA";
pub const CHECKPOINT_VERSION: u8 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u8, expected: u8 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint metadata invalid: {0}")]
    Metadata(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub vocab: Vocab,
    pub params: ModelParams,
    pub config: TrainConfig,
    pub final_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    vocab: Vocab,
    config: TrainConfig,
    vocab_size: usize,
    dim: usize,
    hidden: usize,
}

impl Checkpoint {
    /// Layout: magic, version byte, u64 metadata length, JSON metadata,
    /// f64 parameters (little endian), f64 final loss, SHA-256 of everything
    /// before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = CheckpointMeta {
            vocab: self.vocab.clone(),
            config: self.config.clone(),
            vocab_size: self.params.vocab_size,
            dim: self.params.dim,
            hidden: self.params.hidden,
        };
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(CHECKPOINT_VERSION);
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        for t in self.params.tensors() {
            for v in t {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&self.final_loss.to_le_bytes());
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() + 1 {
            return Err(CheckpointError::Truncated("missing header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: bytes[4],
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut pos = 5;
        let meta_len = read_u64(bytes, &mut pos)? as usize;
        let meta_bytes = take(bytes, &mut pos, meta_len)?;
        // Size check needs dims from metadata, so a truncated file whose
        // metadata survived is still reported as truncated below.
        let meta: Result<CheckpointMeta, _> = serde_json::from_slice(meta_bytes);
        let meta = match meta {
            Ok(m) => m,
            Err(e) => {
                verify_digest(bytes)?;
                return Err(CheckpointError::Metadata(e.to_string()));
            }
        };
        let (v, d, h) = (meta.vocab_size, meta.dim, meta.hidden);
        let n_params = v * d + 2 * d * h + h + h * NUM_CLASSES + NUM_CLASSES;
        let expected = pos + 8 * (n_params + 1) + DIGEST_LEN;
        if bytes.len() < expected {
            return Err(CheckpointError::Truncated(format!(
                "{} bytes, expected {expected}",
                bytes.len()
            )));
        }
        if bytes.len() > expected {
            return Err(CheckpointError::Metadata("trailing bytes".into()));
        }
        verify_digest(bytes)?;

        let mut params = ModelParams::zeros(v, d, h);
        for t in params.tensors_mut() {
            for slot in t.iter_mut() {
                *slot = read_f64(bytes, &mut pos)?;
            }
        }
        let final_loss = read_f64(bytes, &mut pos)?;
        if meta.vocab.len() != v {
            return Err(CheckpointError::Metadata(format!(
                "vocab has {} entries, parameters expect {v}",
                meta.vocab.len()
            )));
        }
        Ok(Self {
            vocab: meta.vocab,
            params,
            config: meta.config,
            final_loss,
        })
    }
}

fn verify_digest(bytes: &[u8]) -> Result<(), CheckpointError> {
    if bytes.len() < DIGEST_LEN {
        return Err(CheckpointError::Truncated("missing digest".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }
    Ok(())
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8], CheckpointError> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::Truncated(format!("needed {n} bytes at offset {pos}")))?;
    let out = &bytes[*pos..end];
    *pos = end;
    Ok(out)
}

fn read_u64(bytes: &[u8], pos: &mut usize) -> Result<u64, CheckpointError> {
    let raw = take(bytes, pos, 8)?;
    Ok(u64::from_le_bytes(raw.try_into().expect("8 bytes")))
}

fn read_f64(bytes: &[u8], pos: &mut usize) -> Result<f64, CheckpointError> {
    Ok(f64::from_bits(read_u64(bytes, pos)?))
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&checkpoint.to_bytes()).map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
