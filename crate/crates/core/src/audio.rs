//! Time and frequency domain primitives shared by every other module.
//!
//! Samples live on the raw 16-bit PCM amplitude scale (nominally
//! `[-32768, 32767]`), so amplitude bounds such as `eps = 2000` keep their
//! literal meaning throughout the toolkit.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::room::Rir;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono audio on the 16-bit amplitude scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidParameter("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidParameter(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate: sample_rate.max(1) }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.samples)
    }

    /// Same rate, new samples. Used for derived signals such as `x + delta`.
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, self.sample_rate)
    }
}

pub fn max_abs(samples: &[f64]) -> f64 {
    samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()))
}

// ---------------------------------------------------------------------------
// WAV I/O

const PCM_FORMAT: u16 = 1;

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses a RIFF/WAVE byte buffer holding 16-bit mono PCM.
pub fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 {
        return Err(Error::Format("file shorter than RIFF header".into()));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("missing RIFF/WAVE signature".into()));
    }

    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format(format!("chunk {:?} truncated", String::from_utf8_lossy(id))))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Format("fmt chunk shorter than 16 bytes".into()));
                }
                fmt = Some((read_u16(body, 0), read_u16(body, 2), read_u32(body, 4), read_u16(body, 14)));
            }
            b"data" => {
                data = Some(body);
                if fmt.is_some() {
                    break;
                }
            }
            _ => {}
        }
        // Chunks are word aligned.
        pos = body_end + (size & 1);
    }

    let (format, channels, sample_rate, bits) =
        fmt.ok_or_else(|| Error::Format("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Format("no data chunk".into()))?;
    if format != PCM_FORMAT {
        return Err(Error::UnsupportedFormat(format!("audio format tag {format}, expected PCM (1)")));
    }
    if channels != 1 {
        return Err(Error::UnsupportedFormat(format!("{channels} channels, expected mono")));
    }
    if bits != 16 {
        return Err(Error::UnsupportedFormat(format!("{bits} bits per sample, expected 16")));
    }
    if sample_rate == 0 {
        return Err(Error::Format("sample rate of zero".into()));
    }
    if data.len() % 2 != 0 {
        return Err(Error::Format("data chunk has an odd byte count".into()));
    }

    let samples = data
        .chunks_exact(2)
        .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])))
        .collect();
    Waveform::new(samples, sample_rate)
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    parse_wav(&fs::read(path)?)
}

/// Encodes as 16-bit mono PCM. Samples are rounded half away from zero and
/// must land inside the 16-bit range; clipping is the caller's job.
pub fn encode_wav(w: &Waveform) -> Result<Vec<u8>> {
    let mut pcm = Vec::with_capacity(w.len() * 2);
    for (index, &s) in w.samples().iter().enumerate() {
        let r = s.round();
        if !(-32768.0..=32767.0).contains(&r) {
            return Err(Error::Range { index, value: s });
        }
        pcm.extend_from_slice(&(r as i16).to_le_bytes());
    }
    let data_len = u32::try_from(pcm.len()).map_err(|_| Error::InvalidParameter("waveform too long for WAV".into()))?;

    let mut out = Vec::with_capacity(44 + pcm.len());
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate().to_le_bytes());
    out.extend_from_slice(&(w.sample_rate() * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    out.extend_from_slice(&pcm);
    Ok(out)
}

pub fn save_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_wav(w)?;
    fs::write(path, bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// STFT

/// Periodic Hann window scaled by sqrt(8/3), as used by MPEG-style
/// psychoacoustic models.
pub fn modified_hann(n: usize) -> Vec<f64> {
    let scale = (8.0_f64 / 3.0).sqrt();
    hann(n).into_iter().map(|w| w * scale).collect()
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos())).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StftConfig {
    window_size: usize,
    hop: usize,
    window: Vec<f64>,
}

impl StftConfig {
    pub fn new(window_size: usize, hop: usize, window: Vec<f64>) -> Result<Self> {
        if window_size == 0 || hop == 0 || hop > window_size {
            return Err(Error::InvalidParameter(format!(
                "need 0 < hop <= window size, got hop {hop}, window size {window_size}"
            )));
        }
        if window.len() != window_size {
            return Err(Error::InvalidParameter(format!(
                "window has {} weights, expected {window_size}",
                window.len()
            )));
        }
        if window.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidParameter("window weights must be finite and non-negative".into()));
        }
        Ok(Self { window_size, hop, window })
    }

    pub fn with_modified_hann(window_size: usize, hop: usize) -> Result<Self> {
        Self::new(window_size, hop, modified_hann(window_size))
    }

    /// The analysis used for masking thresholds: N = 2048, hop 512.
    pub fn psychoacoustic() -> Self {
        Self::with_modified_hann(2048, 512).expect("static config is valid")
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn n_bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    /// Frames that fit entirely inside `len` samples; the partial tail is
    /// dropped.
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.window_size {
            0
        } else {
            (len - self.window_size) / self.hop + 1
        }
    }
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::psychoacoustic()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: Vec<Vec<Complex64>>,
    pub config: StftConfig,
}

impl Spectrogram {
    pub fn zeros(config: &StftConfig, n_frames: usize) -> Self {
        Self { frames: vec![vec![Complex64::new(0.0, 0.0); config.n_bins()]; n_frames], config: config.clone() }
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Real inner product, treating each complex bin as a pair of reals.
    pub fn inner(&self, other: &Spectrogram) -> f64 {
        self.frames
            .iter()
            .zip(&other.frames)
            .flat_map(|(a, b)| a.iter().zip(b))
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }
}

/// Reusable STFT with cached FFT plans. The hot loops in the attacks go
/// through this rather than the free functions.
#[derive(Clone)]
pub struct StftPlan {
    config: StftConfig,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan").field("config", &self.config).finish()
    }
}

impl StftPlan {
    pub fn new(config: StftConfig) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(config.window_size);
        let inverse = planner.plan_fft_inverse(config.window_size);
        Self { config, forward, inverse }
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn forward(&self, samples: &[f64]) -> Result<Spectrogram> {
        let n = self.config.window_size;
        if samples.len() < n {
            return Err(Error::InputTooShort { len: samples.len(), needed: n });
        }
        let n_frames = self.config.n_frames(samples.len());
        let n_bins = self.config.n_bins();
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        let mut frames = Vec::with_capacity(n_frames);
        for t in 0..n_frames {
            let start = t * self.config.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(self.config.window[i] * samples[start + i], 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            frames.push(buf[..n_bins].to_vec());
        }
        Ok(Spectrogram { frames, config: self.config.clone() })
    }

    /// Adjoint of [`StftPlan::forward`] under the real inner product on
    /// spectrogram bins: `<stft(x), g> == <x, adjoint(g)>`.
    pub fn adjoint(&self, g: &Spectrogram, out_len: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; out_len];
        self.adjoint_into(&g.frames, &mut out)?;
        Ok(out)
    }

    /// Accumulates the adjoint into `out` (which fixes the signal length).
    pub fn adjoint_into(&self, frames: &[Vec<Complex64>], out: &mut [f64]) -> Result<()> {
        let n = self.config.window_size;
        let n_bins = self.config.n_bins();
        let expected = self.config.n_frames(out.len());
        if frames.len() != expected {
            return Err(Error::Shape(format!(
                "gradient has {} frames, signal of {} samples has {expected}",
                frames.len(),
                out.len()
            )));
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        for (t, frame) in frames.iter().enumerate() {
            if frame.len() != n_bins {
                return Err(Error::Shape(format!("frame {t} has {} bins, expected {n_bins}", frame.len())));
            }
            if frame.iter().all(|c| c.re == 0.0 && c.im == 0.0) {
                continue;
            }
            buf[..n_bins].copy_from_slice(frame);
            buf[n_bins..].iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
            // Unnormalised inverse DFT evaluates sum_k g_k e^{+2 pi i k n / N}.
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = t * self.config.hop;
            for i in 0..n {
                out[start + i] += self.config.window[i] * buf[i].re;
            }
        }
        Ok(())
    }
}

pub fn stft(w: &Waveform, c: &StftConfig) -> Result<Spectrogram> {
    StftPlan::new(c.clone()).forward(w.samples())
}

pub fn stft_adjoint(g: &Spectrogram, c: &StftConfig, out_len: usize) -> Result<Vec<f64>> {
    if g.frames.len() != c.n_frames(out_len) {
        return Err(Error::Shape(format!(
            "gradient has {} frames, expected {} for {out_len} samples",
            g.frames.len(),
            c.n_frames(out_len)
        )));
    }
    StftPlan::new(c.clone()).adjoint(g, out_len)
}

// ---------------------------------------------------------------------------
// Convolution

/// Linear convolution truncated to the length of `x`.
pub fn convolve_samples(x: &[f64], taps: &[f64]) -> Result<Vec<f64>> {
    if taps.is_empty() {
        return Err(Error::EmptyFilter);
    }
    if x.is_empty() {
        return Ok(Vec::new());
    }
    // Direct summation wins for short filters.
    if taps.len() <= 64 || x.len().saturating_mul(taps.len()) <= 1 << 16 {
        let mut out = vec![0.0; x.len()];
        for (n, o) in out.iter_mut().enumerate() {
            let hi = n.min(taps.len() - 1);
            let mut acc = 0.0;
            for m in 0..=hi {
                acc += taps[m] * x[n - m];
            }
            *o = acc;
        }
        return Ok(out);
    }
    Ok(FftConvolver::new(taps, x.len())?.apply(x))
}

/// `t(x) = x * r`, truncated to `len(x)`.
pub fn convolve(x: &Waveform, r: &Rir) -> Result<Waveform> {
    if x.sample_rate() != r.sample_rate() {
        return Err(Error::RateMismatch { left: x.sample_rate(), right: r.sample_rate() });
    }
    let out = convolve_samples(x.samples(), r.taps())?;
    x.with_samples(out)
}

/// FFT convolution against a fixed filter for signals of one fixed length,
/// with the adjoint (correlation) needed to backpropagate through it.
#[derive(Clone)]
pub struct FftConvolver {
    signal_len: usize,
    size: usize,
    spectrum: Vec<Complex64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FftConvolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftConvolver").field("signal_len", &self.signal_len).field("size", &self.size).finish()
    }
}

impl FftConvolver {
    pub fn new(taps: &[f64], signal_len: usize) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::EmptyFilter);
        }
        let size = (signal_len + taps.len()).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(size);
        let inverse = planner.plan_fft_inverse(size);
        let mut spectrum: Vec<Complex64> = taps.iter().map(|&t| Complex64::new(t, 0.0)).collect();
        spectrum.resize(size, Complex64::new(0.0, 0.0));
        forward.process(&mut spectrum);
        Ok(Self { signal_len, size, spectrum, forward, inverse })
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    fn run(&self, x: &[f64], conjugate: bool) -> Vec<f64> {
        assert_eq!(x.len(), self.signal_len, "convolver built for a different signal length");
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        buf.resize(self.size, Complex64::new(0.0, 0.0));
        self.forward.process(&mut buf);
        for (b, h) in buf.iter_mut().zip(&self.spectrum) {
            *b *= if conjugate { h.conj() } else { *h };
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.size as f64;
        buf[..self.signal_len].iter().map(|c| c.re * scale).collect()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.run(x, false)
    }

    /// Transpose of `apply`: `out[j] = sum_n g[n] r[n - j]`.
    pub fn adjoint(&self, g: &[f64]) -> Vec<f64> {
        self.run(g, true)
    }
}

// ---------------------------------------------------------------------------
// Clipping

/// Clamps every sample into `[-eps, eps]`.
pub fn clip_maxnorm(delta: &Waveform, eps: f64) -> Waveform {
    let mut samples = delta.samples().to_vec();
    clip_in_place(&mut samples, eps);
    Waveform { samples, sample_rate: delta.sample_rate() }
}

pub fn clip_in_place(samples: &mut [f64], eps: f64) {
    let eps = eps.max(0.0);
    for s in samples {
        *s = s.clamp(-eps, eps);
    }
}

/// Clamps into the 16-bit PCM range so the result can be written as WAV.
pub fn clip_to_pcm(samples: &[f64]) -> Vec<f64> {
    samples.iter().map(|s| s.clamp(-32768.0, 32767.0)).collect()
}
