//! Synthetic spoken-digit corpus: each word is a short chord with a noise
//! onset, separated by silence, with seeded jitter everywhere.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::features::FeatureConfig;
use super::{Transcription, Vocab};
use crate::audio::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub sample_rate: u32,
    /// Nominal peak amplitude of a word before gain jitter.
    pub amplitude: f64,
    pub gain_range: (f64, f64),
    pub word_seconds: (f64, f64),
    pub gap_seconds: (f64, f64),
    pub edge_seconds: (f64, f64),
    pub words: (usize, usize),
    /// Background noise standard deviation relative to `amplitude`.
    pub noise_level: f64,
    pub pitch_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            amplitude: 4000.0,
            gain_range: (0.7, 1.3),
            word_seconds: (0.08, 0.12),
            gap_seconds: (0.02, 0.04),
            edge_seconds: (0.03, 0.06),
            words: (3, 8),
            noise_level: 0.002,
            pitch_jitter: 0.02,
        }
    }
}

/// Token sequence plus the seed used to render it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceSpec {
    pub tokens: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub waveform: Waveform,
    pub transcription: Transcription,
    /// Sample ranges `[start, end)` of each word, in order.
    pub word_spans: Vec<(usize, usize)>,
}

impl CorpusItem {
    /// Per-frame labels under `fc`: the word covering the centre sample of
    /// each analysis window, silence elsewhere.
    pub fn frame_labels(&self, fc: &FeatureConfig, silence: usize) -> Vec<usize> {
        let n = fc.stft.window_size();
        let hop = fc.stft.hop();
        let len = self.waveform.len();
        if len < n {
            return Vec::new();
        }
        let frames = (len - n) / hop + 1;
        (0..frames)
            .map(|t| {
                let centre = t * hop + n / 2;
                self.word_spans
                    .iter()
                    .zip(&self.transcription.tokens)
                    .find(|((s, e), _)| (*s..*e).contains(&centre))
                    .map_or(silence, |(_, &tok)| tok)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    vocab: Vocab,
    config: SynthConfig,
}

impl ToyCorpus {
    pub fn new(vocab: Vocab, config: SynthConfig) -> Result<Self> {
        if config.words.0 == 0 || config.words.0 > config.words.1 {
            return Err(Error::InvalidParameter("word count range must be non-empty and start at 1 or more".into()));
        }
        if vocab.word_tokens().len() < 2 {
            return Err(Error::InvalidParameter("corpus needs at least two word tokens".into()));
        }
        for (lo, hi) in [config.gain_range, config.word_seconds, config.gap_seconds, config.edge_seconds] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::InvalidParameter(format!("bad range [{lo}, {hi}]")));
            }
        }
        Ok(Self { vocab, config })
    }

    pub fn toy() -> Self {
        Self::new(Vocab::toy(), SynthConfig::default()).expect("default corpus is valid")
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    /// Random token sequence without back-to-back repeats.
    pub fn random_tokens<R: Rng>(&self, rng: &mut R, words: (usize, usize)) -> Vec<usize> {
        let pool = self.vocab.word_tokens();
        let n = rng.gen_range(words.0..=words.1);
        let mut out: Vec<usize> = Vec::with_capacity(n);
        while out.len() < n {
            let t = pool[rng.gen_range(0..pool.len())];
            if out.last() != Some(&t) {
                out.push(t);
            }
        }
        out
    }

    /// Fresh token sequence from `seed` using the configured word-count range.
    pub fn spec_from_seed(&self, seed: u64) -> UtteranceSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = self.random_tokens(&mut rng, self.config.words);
        UtteranceSpec { tokens, seed: rng.gen() }
    }

    pub fn item_from_seed(&self, seed: u64) -> Result<CorpusItem> {
        self.render(&self.spec_from_seed(seed))
    }

    pub fn generate(&self, seed: u64, count: usize) -> Result<Vec<CorpusItem>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.item_from_seed(rng.gen())).collect()
    }

    /// `count` utterances with `words` words each, paired with a random
    /// target of the same length that differs from the spoken tokens.
    pub fn attack_suite(&self, seed: u64, count: usize, words: (usize, usize)) -> Result<Vec<(CorpusItem, Transcription)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let tokens = self.random_tokens(&mut rng, words);
            let item = self.render(&UtteranceSpec { tokens, seed: rng.gen() })?;
            let n = item.transcription.tokens.len();
            let target = loop {
                let t = self.random_tokens(&mut rng, (n, n));
                if t != item.transcription.tokens {
                    break t;
                }
            };
            out.push((item, Transcription::from_tokens(target, &self.vocab)?));
        }
        Ok(out)
    }

    fn chord(&self, token: usize) -> Result<[f64; 3]> {
        let j = self
            .vocab
            .word_tokens()
            .iter()
            .position(|&t| t == token)
            .ok_or_else(|| Error::InvalidParameter(format!("token {token} is not a word")))?;
        Ok([
            250.0 * 1.18f64.powi(j as i32),
            1300.0 + 190.0 * ((3 * j) % 10) as f64,
            2600.0 + 150.0 * ((7 * j) % 10) as f64,
        ])
    }

    pub fn render(&self, spec: &UtteranceSpec) -> Result<CorpusItem> {
        let c = &self.config;
        let fs = c.sample_rate as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let secs = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| (rng.gen_range(lo..=hi) * fs).round() as usize;
        let gain = rng.gen_range(c.gain_range.0..=c.gain_range.1) * c.amplitude;

        let mut samples = vec![0.0; secs(&mut rng, c.edge_seconds)];
        let mut spans = Vec::with_capacity(spec.tokens.len());
        for (w, &tok) in spec.tokens.iter().enumerate() {
            if w > 0 {
                let gap = secs(&mut rng, c.gap_seconds);
                samples.resize(samples.len() + gap, 0.0);
            }
            let freqs = self.chord(tok)?;
            let len = secs(&mut rng, c.word_seconds);
            let start = samples.len();
            let jitter: Vec<f64> =
                freqs.iter().map(|f| f * (1.0 + rng.gen_range(-c.pitch_jitter..=c.pitch_jitter))).collect();
            let phases: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            let ramp = (0.01 * fs) as usize;
            let burst = (0.015 * fs) as usize;
            for i in 0..len {
                let t = i as f64 / fs;
                let mut v = 0.0;
                for ((f, ph), a) in jitter.iter().zip(&phases).zip([0.5, 0.3, 0.2]) {
                    v += a * (2.0 * PI * f * t + ph).sin();
                }
                if i < burst {
                    v += 0.3 * rng.gen_range(-1.0..1.0);
                }
                let env = if i < ramp {
                    0.5 * (1.0 - (PI * i as f64 / ramp as f64).cos())
                } else if i >= len - ramp {
                    0.5 * (1.0 - (PI * (len - 1 - i) as f64 / ramp as f64).cos())
                } else {
                    1.0
                };
                samples.push(gain * env * v);
            }
            spans.push((start, start + len));
        }
        let tail = secs(&mut rng, c.edge_seconds);
        samples.resize(samples.len() + tail, 0.0);

        let noise = c.noise_level * gain;
        for s in &mut samples {
            *s += noise * rng.gen_range(-1.0..1.0) * 3f64.sqrt();
        }
        Ok(CorpusItem {
            waveform: Waveform::new(samples, c.sample_rate)?,
            transcription: Transcription::from_tokens(spec.tokens.clone(), &self.vocab)?,
            word_spans: spans,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let c = ToyCorpus::toy();
        let a = c.item_from_seed(42).unwrap();
        let b = c.item_from_seed(42).unwrap();
        assert_eq!(a.waveform, b.waveform);
        assert_eq!(a.transcription, b.transcription);
        assert_ne!(c.item_from_seed(43).unwrap().waveform, a.waveform);
    }

    #[test]
    fn utterances_respect_config() {
        let c = ToyCorpus::toy();
        for item in c.generate(1, 30).unwrap() {
            let n = item.transcription.tokens.len();
            assert!((3..=8).contains(&n));
            assert!(item.transcription.tokens.windows(2).all(|w| w[0] != w[1]));
            assert!(item.waveform.max_abs() < 32767.0);
            assert_eq!(item.word_spans.len(), n);
        }
    }

    #[test]
    fn suite_targets_differ_from_the_audio() {
        let c = ToyCorpus::toy();
        let suite = c.attack_suite(2, 15, (3, 4)).unwrap();
        assert_eq!(suite.len(), 15);
        for (item, target) in &suite {
            assert_eq!(item.transcription.tokens.len(), target.tokens.len());
            assert_ne!(item.transcription.tokens, target.tokens);
            assert!(target.tokens.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn frame_labels_cover_every_word() {
        let c = ToyCorpus::toy();
        let fc = FeatureConfig::default();
        let item = c.item_from_seed(5).unwrap();
        let labels = item.frame_labels(&fc, 0);
        assert_eq!(labels.len(), (item.waveform.len() - 512) / 160 + 1);
        assert_eq!(labels[0], 0);
        let mut collapsed = labels.clone();
        collapsed.dedup();
        collapsed.retain(|&t| t != 0);
        assert_eq!(collapsed, item.transcription.tokens);
    }
}
