//! Per-frame linear classifier over log mel features.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::features::{FeatureConfig, FeatureExtractor, FeatureTrace};
use super::{align_target, collapse, Recognizer, Transcription, Vocab};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PMTY";
const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelParams {
    pub vocab: Vocab,
    pub n_mels: usize,
    /// Row-major `vocab.len() x n_mels`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ToyModelParams {
    pub fn zeros(vocab: Vocab, n_mels: usize) -> Self {
        let v = vocab.len();
        Self { vocab, n_mels, weights: vec![0.0; v * n_mels], bias: vec![0.0; v] }
    }

    pub fn random<R: Rng>(vocab: Vocab, n_mels: usize, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(vocab, n_mels);
        for w in &mut p.weights {
            *w = rng.gen_range(-scale..scale);
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vocab.len();
        if v < 2 || self.n_mels == 0 {
            return Err(Error::InvalidParameter("model needs >= 2 tokens and >= 1 feature".into()));
        }
        if self.weights.len() != v * self.n_mels || self.bias.len() != v {
            return Err(Error::Shape(format!(
                "parameter sizes {}/{} do not match vocab {v} x features {}",
                self.weights.len(),
                self.bias.len(),
                self.n_mels
            )));
        }
        if self.weights.iter().chain(&self.bias).any(|w| !w.is_finite()) {
            return Err(Error::InvalidParameter("non-finite model parameter".into()));
        }
        Ok(())
    }

    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.n_mels)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(feature).map(|(w, f)| w * f).sum::<f64>() + b)
            .collect()
    }

    /// Flat binary encoding: `PMTY`, version, vocab size, feature count
    /// (all u32 LE), then weights and bias as f64 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * (self.weights.len() + self.bias.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_mels as u32).to_le_bytes());
        for w in self.weights.iter().chain(&self.bias) {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], vocab: Vocab) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::ModelFormat("file shorter than header".into()));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::ModelFormat("bad magic".into()));
        }
        let word = |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
        let version = word(4);
        if version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let v = word(8) as usize;
        let n_mels = word(12) as usize;
        if v != vocab.len() {
            return Err(Error::ModelFormat(format!("header says {v} tokens, vocabulary file has {}", vocab.len())));
        }
        let count = v
            .checked_mul(n_mels)
            .and_then(|c| c.checked_add(v))
            .ok_or_else(|| Error::ModelFormat("parameter count overflows".into()))?;
        if bytes.len() - HEADER_LEN != count.saturating_mul(8) {
            return Err(Error::ModelFormat(format!(
                "expected {count} parameters, body holds {} bytes",
                bytes.len() - HEADER_LEN
            )));
        }
        let mut values = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
        let weights: Vec<f64> = values.by_ref().take(v * n_mels).collect();
        let bias: Vec<f64> = values.collect();
        let params = Self { vocab, n_mels, weights, bias };
        params.validate().map_err(|e| Error::ModelFormat(e.to_string()))?;
        Ok(params)
    }

    pub fn vocab_sidecar(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".vocab");
        PathBuf::from(s)
    }

    /// Writes the parameter file and its `.vocab` sidecar (one name per line).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes())?;
        let mut names = self.vocab.names().join("\n");
        names.push('\n');
        fs::write(Self::vocab_sidecar(path), names)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let names = fs::read_to_string(Self::vocab_sidecar(path))?;
        let vocab = Vocab::new(names.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())?;
        Self::from_bytes(&fs::read(path)?, vocab)
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// The toy recognizer: log mel features, a linear layer, softmax.
#[derive(Debug, Clone)]
pub struct ToyRecognizer {
    params: ToyModelParams,
    extractor: FeatureExtractor,
}

impl ToyRecognizer {
    pub fn new(params: ToyModelParams, features: FeatureConfig) -> Result<Self> {
        params.validate()?;
        if params.n_mels != features.n_mels {
            return Err(Error::Shape(format!(
                "model expects {} features, extractor produces {}",
                params.n_mels, features.n_mels
            )));
        }
        Ok(Self { params, extractor: FeatureExtractor::new(features)? })
    }

    pub fn params(&self) -> &ToyModelParams {
        &self.params
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn frame_argmax(&self, features: &[Vec<f64>]) -> Vec<usize> {
        features.iter().map(|f| argmax(&self.params.logits(f))).collect()
    }

    /// Mean frame cross-entropy against explicit per-frame labels, with the
    /// gradient on the features when requested.
    pub fn frame_loss(&self, trace: &FeatureTrace, labels: &[usize], want_grad: bool) -> Result<(f64, Vec<Vec<f64>>)> {
        let n = trace.features.len();
        if labels.len() != n {
            return Err(Error::Alignment(format!("{} labels for {n} frames", labels.len())));
        }
        if n == 0 {
            return Err(Error::Alignment("no frames".into()));
        }
        let inv = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(if want_grad { n } else { 0 });
        for (feat, &label) in trace.features.iter().zip(labels) {
            let logp = log_softmax(&self.params.logits(feat));
            loss -= logp[label];
            if want_grad {
                let mut d_feat = vec![0.0; self.params.n_mels];
                for (c, lp) in logp.iter().enumerate() {
                    let d_logit = (lp.exp() - if c == label { 1.0 } else { 0.0 }) * inv;
                    if d_logit == 0.0 {
                        continue;
                    }
                    let row = &self.params.weights[c * self.params.n_mels..(c + 1) * self.params.n_mels];
                    for (d, w) in d_feat.iter_mut().zip(row) {
                        *d += d_logit * w;
                    }
                }
                grads.push(d_feat);
            }
        }
        Ok((loss * inv, grads))
    }

    fn decode(&self, features: &[Vec<f64>]) -> Result<Transcription> {
        let frames = self.frame_argmax(features);
        Transcription::from_tokens(collapse(&frames, self.params.vocab.silence()), &self.params.vocab)
    }

    fn aligned_labels(&self, len: usize, target: &Transcription) -> Result<Vec<usize>> {
        align_target(target, self.extractor.n_frames(len))
    }
}

impl Recognizer for ToyRecognizer {
    fn vocab(&self) -> &Vocab {
        &self.params.vocab
    }

    fn sample_rate(&self) -> u32 {
        self.extractor.config().sample_rate
    }

    fn loss(&self, input: &[f64], target: &Transcription) -> Result<f64> {
        let trace = self.extractor.forward(input)?;
        let labels = self.aligned_labels(input.len(), target)?;
        Ok(self.frame_loss(&trace, &labels, false)?.0)
    }

    fn loss_and_gradient(&self, input: &[f64], target: &Transcription) -> Result<(f64, Vec<f64>)> {
        let trace = self.extractor.forward(input)?;
        let labels = self.aligned_labels(input.len(), target)?;
        let (loss, d_feat) = self.frame_loss(&trace, &labels, true)?;
        Ok((loss, self.extractor.backward(&trace, &d_feat)?))
    }

    fn transcribe(&self, input: &[f64]) -> Result<Transcription> {
        let feats = self.extractor.features(input)?;
        self.decode(&feats)
    }

    fn evaluate(&self, input: &[f64], target: &Transcription) -> Result<(f64, Vec<f64>, Transcription)> {
        let trace = self.extractor.forward(input)?;
        let labels = self.aligned_labels(input.len(), target)?;
        let (loss, d_feat) = self.frame_loss(&trace, &labels, true)?;
        let text = self.decode(&trace.features)?;
        Ok((loss, self.extractor.backward(&trace, &d_feat)?, text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_model(seed: u64) -> ToyRecognizer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ToyModelParams::random(Vocab::toy(), 40, 0.3, &mut rng);
        for b in &mut p.bias {
            *b = rng.gen_range(-1.0..1.0);
        }
        ToyRecognizer::new(p, FeatureConfig::default()).unwrap()
    }

    fn random_signal(seed: u64, len: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-2000.0..2000.0)).collect()
    }

    // Scalar re-implementation of the loss sharing no code with the model:
    // direct DFT, explicit triangle filters, explicit softmax.
    fn oracle_loss(model: &ToyRecognizer, x: &[f64], target: &Transcription) -> f64 {
        let fc = model.extractor().config();
        let n = fc.stft.window_size();
        let hop = fc.stft.hop();
        let frames = (x.len() - n) / hop + 1;
        let p = model.params();
        let m = target.tokens.len();
        let per = frames / m;
        let mut total = 0.0;
        for t in 0..frames {
            let mut power = vec![0.0; n / 2 + 1];
            for (k, pw) in power.iter_mut().enumerate() {
                let (mut re, mut im) = (0.0, 0.0);
                for i in 0..n {
                    let w = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos());
                    let ang = -2.0 * std::f64::consts::PI * (k * i % n) as f64 / n as f64;
                    re += w * x[t * hop + i] * ang.cos();
                    im += w * x[t * hop + i] * ang.sin();
                }
                *pw = re * re + im * im;
            }
            let feats: Vec<f64> = model
                .extractor()
                .filters()
                .iter()
                .map(|f| {
                    let mut e = fc.log_floor;
                    for (j, w) in f.weights.iter().enumerate() {
                        e += w * power[f.start + j];
                    }
                    e.ln()
                })
                .collect();
            let mut logits = Vec::new();
            for c in 0..p.vocab.len() {
                let mut z = p.bias[c];
                for j in 0..p.n_mels {
                    z += p.weights[c * p.n_mels + j] * feats[j];
                }
                logits.push(z);
            }
            let label = target.tokens[(t / per).min(m - 1)];
            let norm: f64 = logits.iter().map(|z| z.exp()).sum();
            total += -(logits[label].exp() / norm).ln();
        }
        total / frames as f64
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let model = ToyRecognizer::new(ToyModelParams::zeros(Vocab::toy(), 40), FeatureConfig::default()).unwrap();
        let y = Transcription::parse("one two", model.vocab()).unwrap();
        let l = model.loss(&random_signal(1, 3000), &y).unwrap();
        assert!((l - 12f64.ln()).abs() < 1e-12);
        assert!((l - 2.4849).abs() < 1e-4);
    }

    #[test]
    fn huge_margin_drives_loss_to_zero() {
        let mut p = ToyModelParams::zeros(Vocab::toy(), 40);
        p.bias[3] = 1e3;
        let model = ToyRecognizer::new(p, FeatureConfig::default()).unwrap();
        let y = Transcription::from_tokens(vec![3], model.vocab()).unwrap();
        assert!(model.loss(&random_signal(2, 3000), &y).unwrap() < 1e-12);
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        for seed in 0..3 {
            let model = random_model(seed);
            let x = random_signal(seed + 10, 1400);
            let y = Transcription::parse("four seven two", model.vocab()).unwrap();
            let a = model.loss(&x, &y).unwrap();
            let b = oracle_loss(&model, &x, &y);
            assert!((a - b).abs() < 1e-10 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let model = random_model(5);
        let x = random_signal(6, 2400);
        let y = Transcription::parse("five one", model.vocab()).unwrap();
        let (_, g) = model.loss_and_gradient(&x, &y).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-3;
        for _ in 0..50 {
            let i = rng.gen_range(0..x.len());
            let mut p = x.clone();
            p[i] += h;
            let mut m = x.clone();
            m[i] -= h;
            let fd = (model.loss(&p, &y).unwrap() - model.loss(&m, &y).unwrap()) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-300);
            assert!(rel < 1e-4, "sample {i}: analytic {} numeric {fd}", g[i]);
        }

        // Directional derivative along a random direction.
        let u: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = 1e-2;
        let plus: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a - h * b).collect();
        let fd = (model.loss(&plus, &y).unwrap() - model.loss(&minus, &y).unwrap()) / (2.0 * h);
        let analytic: f64 = g.iter().zip(&u).map(|(a, b)| a * b).sum();
        assert!((fd - analytic).abs() / analytic.abs() < 1e-5);
    }

    #[test]
    fn samples_outside_every_frame_get_no_gradient() {
        let model = random_model(8);
        // 700 samples hold frames at 0 and 160 (ending at 672); the rest is dead.
        let x = random_signal(9, 700);
        let y = Transcription::parse("three", model.vocab()).unwrap();
        let (_, g) = model.loss_and_gradient(&x, &y).unwrap();
        assert!(g[672..].iter().all(|&v| v == 0.0));
        assert!(g[..672].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn small_steps_against_the_gradient_reduce_loss() {
        let model = random_model(11);
        let x = random_signal(12, 3000);
        let y = Transcription::parse("eight nine", model.vocab()).unwrap();
        let mut cur = x;
        let mut prev = model.loss(&cur, &y).unwrap();
        for _ in 0..5 {
            let (_, g) = model.loss_and_gradient(&cur, &y).unwrap();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (c, gi) in cur.iter_mut().zip(&g) {
                *c -= 1.0 * gi / norm;
            }
            let l = model.loss(&cur, &y).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn all_silence_decodes_to_nothing() {
        let mut p = ToyModelParams::zeros(Vocab::toy(), 40);
        p.bias[0] = 5.0;
        let model = ToyRecognizer::new(p, FeatureConfig::default()).unwrap();
        assert!(model.transcribe(&random_signal(3, 2000)).unwrap().is_empty());
    }

    #[test]
    fn serialization_round_trip_and_errors() {
        let model = random_model(13);
        let bytes = model.params().to_bytes();
        assert_eq!(&bytes[..4], b"PMTY");
        assert_eq!(bytes.len(), 16 + 8 * (12 * 40 + 12));
        let back = ToyModelParams::from_bytes(&bytes, Vocab::toy()).unwrap();
        assert_eq!(&back, model.params());

        assert!(ToyModelParams::from_bytes(&bytes[..bytes.len() - 1], Vocab::toy()).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(ToyModelParams::from_bytes(&wrong, Vocab::toy()).is_err());
        let mut nan = bytes;
        nan[16..24].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(ToyModelParams::from_bytes(&nan, Vocab::toy()).is_err());
    }
}
