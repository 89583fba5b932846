//! Full-batch training of the toy recognizer on frame-labelled audio.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::{CorpusItem, ToyCorpus};
use super::features::{FeatureConfig, FeatureExtractor};
use super::model::{ToyModelParams, ToyRecognizer};
use super::{Recognizer, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub init_scale: f64,
    /// Minimum training sentence accuracy, as a fraction.
    pub min_accuracy: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { seed: 0, iterations: 600, learning_rate: 0.05, weight_decay: 1e-4, init_scale: 0.01, min_accuracy: 0.95 }
    }
}

/// Number of utterances [`train_toy_recognizer`] synthesises.
pub const DEFAULT_CORPUS_SIZE: usize = 200;

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Mean frame cross-entropy and its parameter gradient, packed as
/// `[weights..., bias...]`.
fn batch_loss(p: &ToyModelParams, frames: &[(Vec<f64>, usize)]) -> (f64, Vec<f64>) {
    let v = p.vocab.len();
    let d = p.n_mels;
    let mut grad = vec![0.0; v * d + v];
    let mut loss = 0.0;
    let inv = 1.0 / frames.len() as f64;
    let mut probs = vec![0.0; v];
    for (feat, label) in frames {
        let logits = p.logits(feat);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (pr, l) in probs.iter_mut().zip(&logits) {
            *pr = (l - max).exp();
            z += *pr;
        }
        loss -= (probs[*label] / z).ln();
        for (c, pr) in probs.iter().enumerate() {
            let g = (pr / z - if c == *label { 1.0 } else { 0.0 }) * inv;
            for (gw, f) in grad[c * d..(c + 1) * d].iter_mut().zip(feat) {
                *gw += g * f;
            }
            grad[v * d + c] += g;
        }
    }
    (loss * inv, grad)
}

/// Training sentence accuracy of `model` on `items`, as a fraction.
pub fn sentence_accuracy_on(model: &ToyRecognizer, items: &[CorpusItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut hits = 0;
    for item in items {
        if model.transcribe(item.waveform.samples())?.tokens == item.transcription.tokens {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}

/// Trains a linear frame classifier on labelled utterances with Adam.
/// Deterministic given `cfg.seed`. Fails if the final training sentence
/// accuracy is below `cfg.min_accuracy`.
pub fn train_toy(items: &[CorpusItem], vocab: &Vocab, fc: &FeatureConfig, cfg: &TrainConfig) -> Result<ToyModelParams> {
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let extractor = FeatureExtractor::new(fc.clone())?;
    let mut frames = Vec::new();
    for item in items {
        let feats = extractor.features(item.waveform.samples())?;
        let labels = item.frame_labels(fc, vocab.silence());
        if labels.len() != feats.len() {
            return Err(Error::Alignment(format!("{} labels for {} frames", labels.len(), feats.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= vocab.len()) {
            return Err(Error::Alignment(format!("label {bad} outside vocabulary")));
        }
        frames.extend(feats.into_iter().zip(labels));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ToyModelParams::random(vocab.clone(), fc.n_mels, cfg.init_scale, &mut rng);
    let n_w = params.weights.len();
    let mut flat: Vec<f64> = params.weights.iter().chain(&params.bias).copied().collect();
    let mut adam = Adam::new(flat.len());
    let mut last_loss = f64::NAN;
    for _ in 0..cfg.iterations {
        let (loss, mut grad) = batch_loss(&params, &frames);
        last_loss = loss;
        for (g, w) in grad[..n_w].iter_mut().zip(&flat) {
            *g += cfg.weight_decay * w;
        }
        adam.step(&mut flat, &grad, cfg.learning_rate);
        params.weights.copy_from_slice(&flat[..n_w]);
        params.bias.copy_from_slice(&flat[n_w..]);
    }
    params.validate().map_err(|e| Error::Training(e.to_string()))?;

    let model = ToyRecognizer::new(params.clone(), fc.clone())?;
    let acc = sentence_accuracy_on(&model, items)?;
    if acc < cfg.min_accuracy {
        return Err(Error::Training(format!(
            "sentence accuracy {:.1}% after {} iterations (frame loss {last_loss:.4}), need {:.1}%",
            acc * 100.0,
            cfg.iterations,
            cfg.min_accuracy * 100.0
        )));
    }
    Ok(params)
}

/// Synthesises the default toy corpus from `seed` and trains on it.
pub fn train_toy_recognizer(seed: u64) -> Result<ToyRecognizer> {
    let corpus = ToyCorpus::toy();
    let items = corpus.generate(seed, DEFAULT_CORPUS_SIZE)?;
    let fc = FeatureConfig::default();
    let cfg = TrainConfig { seed, ..TrainConfig::default() };
    ToyRecognizer::new(train_toy(&items, corpus.vocab(), &fc, &cfg)?, fc)
}
