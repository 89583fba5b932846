//! A small differentiable recognizer and the contract attacks rely on.
//!
//! Anything implementing [`Recognizer`] can be attacked: the optimisation
//! loops only ever ask for a loss, its input gradient and a transcription.

pub mod corpus;
pub mod features;
pub mod model;
pub mod train;

use crate::error::{Error, Result};

pub use corpus::{CorpusItem, SynthConfig, ToyCorpus, UtteranceSpec};
pub use features::{FeatureConfig, FeatureExtractor};
pub use model::{ToyModelParams, ToyRecognizer};
pub use train::{sentence_accuracy_on, train_toy, train_toy_recognizer, TrainConfig};

/// Token inventory. Index `silence` is dropped by greedy decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    silence: usize,
}

pub const SILENCE_TOKEN: &str = "<sil>";
pub const UNKNOWN_TOKEN: &str = "<unk>";
const WORDS: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

impl Vocab {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::InvalidParameter("vocabulary needs at least two symbols".into()));
        }
        let silence = names
            .iter()
            .position(|n| n == SILENCE_TOKEN)
            .ok_or_else(|| Error::InvalidParameter(format!("vocabulary has no {SILENCE_TOKEN} symbol")))?;
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return Err(Error::InvalidParameter(format!("bad token name {n:?}")));
            }
            if names[..i].contains(n) {
                return Err(Error::InvalidParameter(format!("duplicate token {n:?}")));
            }
        }
        Ok(Self { names, silence })
    }

    /// Silence, ten word tokens and an unknown marker.
    pub fn toy() -> Self {
        let mut names = vec![SILENCE_TOKEN.to_string()];
        names.extend(WORDS.iter().map(|w| w.to_string()));
        names.push(UNKNOWN_TOKEN.to_string());
        Self::new(names).expect("static vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn silence(&self) -> usize {
        self.silence
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    /// Word tokens: everything except silence and the unknown marker.
    pub fn word_tokens(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| i != self.silence && self.names[i] != UNKNOWN_TOKEN).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Transcription {
    pub tokens: Vec<usize>,
    pub text: String,
}

impl Transcription {
    pub fn from_tokens(tokens: Vec<usize>, vocab: &Vocab) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab.len()) {
            return Err(Error::InvalidParameter(format!("token index {bad} outside vocabulary of {}", vocab.len())));
        }
        let text = tokens.iter().map(|&t| vocab.name(t)).collect::<Vec<_>>().join(" ");
        Ok(Self { tokens, text })
    }

    /// Parses whitespace-separated token names (case-insensitive).
    pub fn parse(text: &str, vocab: &Vocab) -> Result<Self> {
        let tokens = text
            .split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                vocab.index_of(&w).ok_or_else(|| Error::InvalidParameter(format!("unknown token {w:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tokens(tokens, vocab)
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn words(&self) -> Vec<&str> {
        self.text.split_whitespace().collect()
    }
}

/// Expands `m` target tokens over `n_frames` frames: each token owns
/// `n_frames / m` consecutive frames and the last token takes the
/// remainder.
pub fn align_target(target: &Transcription, n_frames: usize) -> Result<Vec<usize>> {
    let m = target.tokens.len();
    if m == 0 {
        return Err(Error::Alignment("target transcription is empty".into()));
    }
    if n_frames < m {
        return Err(Error::Alignment(format!("{m} target tokens cannot fit in {n_frames} frames")));
    }
    let per = n_frames / m;
    Ok((0..n_frames).map(|t| target.tokens[(t / per).min(m - 1)]).collect())
}

/// Greedy decoding: collapse runs of identical frame labels, then drop
/// silence.
pub fn collapse(frame_tokens: &[usize], silence: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &t in frame_tokens {
        if prev != Some(t) && t != silence {
            out.push(t);
        }
        prev = Some(t);
    }
    out
}

/// What an attack needs from a speech recognizer.
pub trait Recognizer: Sync {
    fn vocab(&self) -> &Vocab;

    fn sample_rate(&self) -> u32;

    fn loss(&self, input: &[f64], target: &Transcription) -> Result<f64>;

    /// Loss and its gradient with respect to every input sample.
    fn loss_and_gradient(&self, input: &[f64], target: &Transcription) -> Result<(f64, Vec<f64>)>;

    fn transcribe(&self, input: &[f64]) -> Result<Transcription>;

    /// Loss, gradient and transcription of one input in a single call so
    /// implementations can share the forward pass.
    fn evaluate(&self, input: &[f64], target: &Transcription) -> Result<(f64, Vec<f64>, Transcription)> {
        let (loss, grad) = self.loss_and_gradient(input, target)?;
        Ok((loss, grad, self.transcribe(input)?))
    }

    /// Checks that `target` can in principle be emitted: non-empty and free
    /// of silence and of adjacent repeats, which greedy decoding would merge.
    fn check_target(&self, target: &Transcription) -> Result<()> {
        if target.is_empty() {
            return Err(Error::Precondition("target transcription is empty".into()));
        }
        if target.tokens.contains(&self.vocab().silence()) {
            return Err(Error::Precondition("target contains the silence token".into()));
        }
        if target.tokens.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Precondition(format!(
                "target {:?} repeats a token back to back; greedy decoding cannot produce it",
                target.text
            )));
        }
        Ok(())
    }
}
