//! Log mel filter-bank features with a hand-written backward pass.

use crate::audio::{hann, StftConfig, StftPlan, Spectrogram};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub stft: StftConfig,
    pub sample_rate: u32,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Added to mel energies before the logarithm.
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::new(512, 160, hann(512)).expect("static config is valid"),
            sample_rate: 16_000,
            n_mels: 40,
            f_min: 20.0,
            f_max: 7600.0,
            log_floor: 1.0,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// One triangular filter, stored as the first bin it touches plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilter {
    pub start: usize,
    pub weights: Vec<f64>,
}

/// Triangular filters equally spaced on the HTK mel scale. A filter too
/// narrow to cover any bin centre falls back to its nearest bin, so every
/// row has positive mass.
pub fn mel_filterbank(config: &FeatureConfig) -> Result<Vec<MelFilter>> {
    let n_bins = config.stft.n_bins();
    let nyquist = f64::from(config.sample_rate) / 2.0;
    if config.n_mels == 0 || !(config.f_min >= 0.0 && config.f_min < config.f_max && config.f_max <= nyquist) {
        return Err(Error::InvalidParameter(format!(
            "bad mel setup: {} filters over {}..{} Hz (nyquist {nyquist})",
            config.n_mels, config.f_min, config.f_max
        )));
    }
    let bin_hz = f64::from(config.sample_rate) / config.stft.window_size() as f64;
    let lo = hz_to_mel(config.f_min);
    let hi = hz_to_mel(config.f_max);
    let edges: Vec<f64> =
        (0..config.n_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64)).collect();

    let mut filters = Vec::with_capacity(config.n_mels);
    for m in 0..config.n_mels {
        let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut start = None;
        let mut weights = Vec::new();
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f > left && f <= centre {
                (f - left) / (centre - left)
            } else if f > centre && f < right {
                (right - f) / (right - centre)
            } else {
                0.0
            };
            if w > 0.0 {
                start.get_or_insert(k);
                weights.push(w);
            } else if start.is_some() {
                break;
            }
        }
        let filter = match start {
            Some(start) => MelFilter { start, weights },
            None => MelFilter { start: ((centre / bin_hz).round() as usize).min(n_bins - 1), weights: vec![1.0] },
        };
        filters.push(filter);
    }
    Ok(filters)
}

/// Intermediates kept from the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct FeatureTrace {
    pub spectrum: Spectrogram,
    /// Mel energies plus floor, per frame.
    pub mel_floored: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
    pub signal_len: usize,
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    config: FeatureConfig,
    plan: StftPlan,
    filters: Vec<MelFilter>,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        let filters = mel_filterbank(&config)?;
        let plan = StftPlan::new(config.stft.clone());
        Ok(Self { config, plan, filters })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn filters(&self) -> &[MelFilter] {
        &self.filters
    }

    pub fn n_frames(&self, len: usize) -> usize {
        self.config.stft.n_frames(len)
    }

    pub fn forward(&self, x: &[f64]) -> Result<FeatureTrace> {
        let spectrum = self.plan.forward(x)?;
        let mut mel_floored = Vec::with_capacity(spectrum.n_frames());
        let mut features = Vec::with_capacity(spectrum.n_frames());
        for frame in &spectrum.frames {
            let mel: Vec<f64> = self
                .filters
                .iter()
                .map(|f| {
                    let e: f64 =
                        f.weights.iter().zip(&frame[f.start..]).map(|(w, s)| w * s.norm_sqr()).sum();
                    e + self.config.log_floor
                })
                .collect();
            features.push(mel.iter().map(|m| m.ln()).collect());
            mel_floored.push(mel);
        }
        Ok(FeatureTrace { spectrum, mel_floored, features, signal_len: x.len() })
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward(x)?.features)
    }

    /// Pulls a gradient with respect to the features back to the samples.
    pub fn backward(&self, trace: &FeatureTrace, d_features: &[Vec<f64>]) -> Result<Vec<f64>> {
        if d_features.len() != trace.features.len() {
            return Err(Error::Shape(format!(
                "feature gradient has {} frames, trace has {}",
                d_features.len(),
                trace.features.len()
            )));
        }
        let mut d_spec = Vec::with_capacity(d_features.len());
        for ((frame, mel), d_feat) in trace.spectrum.frames.iter().zip(&trace.mel_floored).zip(d_features) {
            let mut d_frame = vec![rustfft::num_complex::Complex64::new(0.0, 0.0); frame.len()];
            for ((f, m), d) in self.filters.iter().zip(mel).zip(d_feat) {
                let d_mel = d / m;
                if d_mel == 0.0 {
                    continue;
                }
                for (i, w) in f.weights.iter().enumerate() {
                    let k = f.start + i;
                    // |s|^2 has gradient 2 s on the (re, im) pair.
                    d_frame[k] += frame[k] * (2.0 * w * d_mel);
                }
            }
            d_spec.push(d_frame);
        }
        let mut out = vec![0.0; trace.signal_len];
        self.plan.adjoint_into(&d_spec, &mut out)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn filterbank_rows_are_positive() {
        let fc = FeatureConfig::default();
        let filters = mel_filterbank(&fc).unwrap();
        assert_eq!(filters.len(), 40);
        for f in &filters {
            assert!(f.weights.iter().all(|&w| w >= 0.0));
            assert!(f.weights.iter().sum::<f64>() > 0.0);
            assert!(f.start + f.weights.len() <= fc.stft.n_bins());
        }
    }

    #[test]
    fn zero_input_gives_log_floor() {
        let fx = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let feats = fx.features(&vec![0.0; 4000]).unwrap();
        assert_eq!(feats.len(), fx.n_frames(4000));
        assert_eq!(feats.len(), (4000 - 512) / 160 + 1);
        assert!(feats.iter().flatten().all(|&v| v == 1.0f64.ln()));
    }

    #[test]
    fn tenfold_amplitude_adds_log_100_where_signal_dominates() {
        let fx = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let tone: Vec<f64> = (0..4000).map(|i| 1000.0 * (2.0 * PI * 1000.0 * i as f64 / 16_000.0).sin()).collect();
        let loud: Vec<f64> = tone.iter().map(|v| v * 10.0).collect();
        let a = fx.features(&tone).unwrap();
        let b = fx.features(&loud).unwrap();
        let (mut checked, target) = (0, 100f64.ln());
        for (fa, fb) in a.iter().zip(&b) {
            for (u, v) in fa.iter().zip(fb) {
                if *u > 15.0 {
                    assert!((v - u - target).abs() < 1e-3);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }
}
