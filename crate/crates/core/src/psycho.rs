//! Frequency-masking threshold and the imperceptibility hinge loss.
//!
//! All maskers are treated as tonal. Levels are in dB relative to a frame
//! normalised so that its loudest bin sits at 96 dB. The loss and its
//! gradient work on the linear power scale to keep the logarithm out of
//! backpropagation.

use rustfft::num_complex::Complex64;

use crate::audio::{StftConfig, StftPlan, Waveform};
use crate::error::{Error, Result};

/// Level every frame is normalised to, in dB.
pub const NORMALIZED_PEAK_DB: f64 = 96.0;
/// Zero-power bins are clamped here before any logarithm.
pub const PSD_FLOOR_DB: f64 = -200.0;
const PSD_FLOOR_LINEAR: f64 = 1e-20;
/// Threshold used at bins outside the audible range.
pub const OUT_OF_RANGE_THRESHOLD_DB: f64 = 200.0;
/// Half-width of the masker dominance neighbourhood, in Bark.
pub const MASKER_NEIGHBOURHOOD_BARK: f64 = 0.5;

const MIN_AUDIBLE_HZ: f64 = 20.0;
const MAX_AUDIBLE_HZ: f64 = 20_000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PsdFrame {
    pub values: Vec<f64>,
    /// `96 - max_k p(k)` of the raw frame; zero until normalised.
    pub normalization_offset: f64,
}

impl PsdFrame {
    /// True when every bin sits at the floor (digital silence).
    pub fn is_silent(&self) -> bool {
        let floor = PSD_FLOOR_DB + self.normalization_offset;
        self.values.iter().all(|&v| v <= floor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Masker {
    pub bin: usize,
    pub bark: f64,
    /// Level after smoothing with both neighbours, dB.
    pub level: f64,
}

/// Global masking threshold for every frame of a clean signal, along with
/// the per-frame quantities the perturbation PSD is normalised by.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskingThreshold {
    pub theta_db: Vec<Vec<f64>>,
    pub theta_linear: Vec<Vec<f64>>,
    /// `96 - max_k p_x(k)` per frame, dB.
    pub offsets_db: Vec<f64>,
    /// `max_k |s_x(k) / N|^2` per frame on the linear scale (floored).
    pub max_psd_linear: Vec<f64>,
    pub config: StftConfig,
    pub sample_rate: u32,
    pub signal_len: usize,
}

impl MaskingThreshold {
    pub fn n_frames(&self) -> usize {
        self.theta_db.len()
    }
}

// ---------------------------------------------------------------------------
// Scalar psychoacoustic curves

/// Absolute threshold of hearing in dB SPL. `+inf` outside 20 Hz..20 kHz.
pub fn ath(f: f64) -> f64 {
    if !(MIN_AUDIBLE_HZ..=MAX_AUDIBLE_HZ).contains(&f) {
        return f64::INFINITY;
    }
    let khz = f / 1000.0;
    3.64 * khz.powf(-0.8) - 6.5 * (-0.6 * (khz - 3.3).powi(2)).exp() + 1e-3 * khz.powi(4)
}

/// Zwicker critical-band rate.
pub fn bark(f: f64) -> f64 {
    13.0 * (0.76 * f / 1000.0).atan() + 3.5 * (f / 7500.0).powi(2).atan()
}

pub fn bin_to_freq(k: usize, window_size: usize, sample_rate: f64) -> f64 {
    k as f64 * sample_rate / window_size as f64
}

/// Two-slope spreading function: 27 dB/Bark below the masker, a
/// level-dependent slope above it.
pub fn spread_function(masker_bark: f64, maskee_bark: f64, masker_level: f64) -> f64 {
    let db = maskee_bark - masker_bark;
    if db <= 0.0 {
        27.0 * db
    } else {
        (-27.0 + 0.37 * (masker_level - 40.0).max(0.0)) * db
    }
}

/// Masking index: how far below its own level a masker's threshold sits.
pub fn masking_index(masker_bark: f64) -> f64 {
    -6.025 - 0.275 * masker_bark
}

pub fn individual_threshold(masker: &Masker, maskee_bark: f64) -> f64 {
    masker.level + masking_index(masker.bark) + spread_function(masker.bark, maskee_bark, masker.level)
}

fn db_to_power(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

fn power_to_db(p: f64) -> f64 {
    10.0 * p.log10()
}

// ---------------------------------------------------------------------------
// PSD

/// `10 log10 |s(k)/N|^2`, floored at -200 dB.
pub fn psd(frame: &[Complex64], window_size: usize) -> PsdFrame {
    let n2 = (window_size * window_size) as f64;
    let values = frame
        .iter()
        .map(|s| power_to_db((s.norm_sqr() / n2).max(PSD_FLOOR_LINEAR)))
        .collect();
    PsdFrame { values, normalization_offset: 0.0 }
}

/// Shifts a raw PSD frame so that its maximum lands on 96 dB.
pub fn normalize_psd(p: &PsdFrame) -> PsdFrame {
    let max = p.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let offset = NORMALIZED_PEAK_DB - max;
    PsdFrame { values: p.values.iter().map(|v| v + offset).collect(), normalization_offset: offset }
}

/// Perturbation PSD expressed on the clean frame's normalised scale.
pub fn normalized_perturbation_psd(p_delta: &PsdFrame, offset_x: f64) -> Vec<f64> {
    p_delta.values.iter().map(|v| v + offset_x).collect()
}

/// Frame-by-frame version of [`normalized_perturbation_psd`].
pub fn normalized_perturbation_psd_frames(p_delta: &[PsdFrame], offsets_x: &[f64]) -> Result<Vec<Vec<f64>>> {
    if p_delta.len() != offsets_x.len() {
        return Err(Error::Shape(format!(
            "perturbation has {} frames, clean audio has {}",
            p_delta.len(),
            offsets_x.len()
        )));
    }
    Ok(p_delta.iter().zip(offsets_x).map(|(p, &o)| normalized_perturbation_psd(p, o)).collect())
}

// ---------------------------------------------------------------------------
// Maskers and thresholds

/// Per-bin lookup tables for one analysis setup.
#[derive(Debug, Clone)]
pub struct BinScale {
    pub freqs: Vec<f64>,
    pub barks: Vec<f64>,
    pub ath_db: Vec<f64>,
}

impl BinScale {
    pub fn new(window_size: usize, sample_rate: u32) -> Self {
        let n_bins = window_size / 2 + 1;
        let freqs: Vec<f64> = (0..n_bins).map(|k| bin_to_freq(k, window_size, f64::from(sample_rate))).collect();
        let barks = freqs.iter().map(|&f| bark(f)).collect();
        let ath_db = freqs.iter().map(|&f| ath(f)).collect();
        Self { freqs, barks, ath_db }
    }
}

/// Picks tonal maskers from a normalised PSD frame: local maxima that clear
/// the threshold in quiet and dominate every other candidate within
/// +-0.5 Bark (ties go to the lower bin). Levels are smoothed with both
/// neighbours on the power scale.
pub fn find_maskers(p: &PsdFrame, scale: &BinScale) -> Vec<Masker> {
    let v = &p.values;
    let n = v.len();
    if n < 3 || p.is_silent() {
        return Vec::new();
    }
    let floor = PSD_FLOOR_DB + p.normalization_offset;

    let candidates: Vec<usize> = (1..n - 1)
        .filter(|&k| v[k] > floor && v[k - 1] <= v[k] && v[k] >= v[k + 1] && v[k] >= scale.ath_db[k])
        .collect();

    candidates
        .iter()
        .copied()
        .filter(|&k| {
            candidates.iter().all(|&j| {
                j == k
                    || (scale.barks[j] - scale.barks[k]).abs() > MASKER_NEIGHBOURHOOD_BARK
                    || v[j] < v[k]
                    || (v[j] == v[k] && j > k)
            })
        })
        .map(|k| Masker {
            bin: k,
            bark: scale.barks[k],
            level: power_to_db(db_to_power(v[k - 1]) + db_to_power(v[k]) + db_to_power(v[k + 1])),
        })
        .collect()
}

/// Combines the threshold in quiet with every masker's individual
/// threshold by power addition. Bins outside the audible range get a
/// fixed 200 dB threshold.
pub fn global_threshold(maskers: &[Masker], scale: &BinScale) -> Vec<f64> {
    scale
        .barks
        .iter()
        .zip(&scale.ath_db)
        .map(|(&b, &quiet)| {
            if quiet.is_infinite() {
                return OUT_OF_RANGE_THRESHOLD_DB;
            }
            if maskers.is_empty() {
                return quiet;
            }
            let total = maskers.iter().fold(db_to_power(quiet), |acc, m| acc + db_to_power(individual_threshold(m, b)));
            // The round trip through power can land an ulp under `quiet`.
            power_to_db(total).max(quiet)
        })
        .collect()
}

/// Runs PSD, normalisation, masker search and threshold combination on
/// every STFT frame of `x`.
pub fn masking_threshold(x: &Waveform, c: &StftConfig) -> Result<MaskingThreshold> {
    let plan = StftPlan::new(c.clone());
    let spec = plan.forward(x.samples())?;
    let scale = BinScale::new(c.window_size(), x.sample_rate());
    let n = c.window_size();

    let mut out = MaskingThreshold {
        theta_db: Vec::with_capacity(spec.n_frames()),
        theta_linear: Vec::with_capacity(spec.n_frames()),
        offsets_db: Vec::with_capacity(spec.n_frames()),
        max_psd_linear: Vec::with_capacity(spec.n_frames()),
        config: c.clone(),
        sample_rate: x.sample_rate(),
        signal_len: x.len(),
    };
    let n2 = (n * n) as f64;
    for frame in &spec.frames {
        let norm = normalize_psd(&psd(frame, n));
        let maskers = find_maskers(&norm, &scale);
        let theta = global_threshold(&maskers, &scale);
        out.theta_linear.push(theta.iter().map(|&t| db_to_power(t)).collect());
        out.theta_db.push(theta);
        out.offsets_db.push(norm.normalization_offset);
        let max_lin = frame.iter().map(|s| s.norm_sqr() / n2).fold(0.0, f64::max).max(PSD_FLOOR_LINEAR);
        out.max_psd_linear.push(max_lin);
    }
    Ok(out)
}

/// Normalised PSD of every frame of `x`, for overlay plots.
pub fn normalized_psd_frames(x: &Waveform, c: &StftConfig) -> Result<Vec<PsdFrame>> {
    let spec = StftPlan::new(c.clone()).forward(x.samples())?;
    Ok(spec.frames.iter().map(|f| normalize_psd(&psd(f, c.window_size()))).collect())
}

// ---------------------------------------------------------------------------
// Imperceptibility loss

/// Evaluates the hinge loss against a precomputed clean-audio threshold.
/// Holds its own STFT plan so repeated evaluation inside an attack loop
/// does no planning work.
#[derive(Debug, Clone)]
pub struct ImperceptibilityLoss {
    threshold: MaskingThreshold,
    plan: StftPlan,
    /// `10^9.6 / max_k p_x(k)` per frame.
    gains: Vec<f64>,
}

impl ImperceptibilityLoss {
    pub fn new(threshold: MaskingThreshold) -> Self {
        let plan = StftPlan::new(threshold.config.clone());
        let peak = db_to_power(NORMALIZED_PEAK_DB);
        let gains = threshold.max_psd_linear.iter().map(|m| peak / m).collect();
        Self { threshold, plan, gains }
    }

    pub fn for_signal(x: &Waveform, c: &StftConfig) -> Result<Self> {
        Ok(Self::new(masking_threshold(x, c)?))
    }

    pub fn threshold(&self) -> &MaskingThreshold {
        &self.threshold
    }

    fn check_len(&self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.threshold.signal_len {
            return Err(Error::Shape(format!(
                "perturbation has {} samples, clean audio has {}",
                delta.len(),
                self.threshold.signal_len
            )));
        }
        Ok(())
    }

    /// Linear-scale normalised perturbation PSD, frame by frame.
    pub fn perturbation_psd_linear(&self, delta: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_len(delta)?;
        let spec = self.plan.forward(delta)?;
        let n = self.threshold.config.window_size() as f64;
        Ok(spec
            .frames
            .iter()
            .zip(&self.gains)
            .map(|(frame, g)| frame.iter().map(|s| g * s.norm_sqr() / (n * n)).collect())
            .collect())
    }

    pub fn value(&self, delta: &[f64]) -> Result<f64> {
        Ok(self.value_and_gradient_impl(delta, false)?.0)
    }

    pub fn value_and_gradient(&self, delta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.value_and_gradient_impl(delta, true)
    }

    fn value_and_gradient_impl(&self, delta: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
        self.check_len(delta)?;
        let spec = self.plan.forward(delta)?;
        let n = self.threshold.config.window_size() as f64;
        let n_bins = self.threshold.config.n_bins() as f64;
        let n_frames = spec.n_frames();
        if n_frames == 0 {
            return Ok((0.0, vec![0.0; delta.len()]));
        }
        let norm = 1.0 / (n_frames as f64 * n_bins);

        let mut loss = 0.0;
        let mut grads: Vec<Vec<Complex64>> = Vec::with_capacity(if want_grad { n_frames } else { 0 });
        for (t, frame) in spec.frames.iter().enumerate() {
            let gain = self.gains[t] / (n * n);
            let theta = &self.threshold.theta_linear[t];
            let mut g_frame = if want_grad { vec![Complex64::new(0.0, 0.0); frame.len()] } else { Vec::new() };
            for (k, s) in frame.iter().enumerate() {
                let excess = gain * s.norm_sqr() - theta[k];
                if excess > 0.0 {
                    loss += excess;
                    if want_grad {
                        // d/ds of gain * |s|^2 as a pair of reals.
                        g_frame[k] = s * (2.0 * gain * norm);
                    }
                }
            }
            if want_grad {
                grads.push(g_frame);
            }
        }
        loss *= norm;
        if !want_grad {
            return Ok((loss, Vec::new()));
        }
        let mut grad = vec![0.0; delta.len()];
        self.plan.adjoint_into(&grads, &mut grad)?;
        Ok((loss, grad))
    }
}

pub fn imperceptibility_loss(threshold: &MaskingThreshold, delta: &Waveform) -> Result<f64> {
    ImperceptibilityLoss::new(threshold.clone()).value(delta.samples())
}

pub fn imperceptibility_loss_gradient(threshold: &MaskingThreshold, delta: &Waveform) -> Result<Vec<f64>> {
    Ok(ImperceptibilityLoss::new(threshold.clone()).value_and_gradient(delta.samples())?.1)
}
