//! Shoebox room simulation with the image source method.
//!
//! Walls share one frequency-independent reflection coefficient derived
//! from the requested RT60 through Sabine's formula. Image sources are
//! placed with an 81-tap Hann-windowed sinc so fractional delays survive.

use std::f64::consts::PI;

use rand::Rng;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::{convolve, StftConfig, StftPlan, Waveform};
use crate::error::{Error, Result};

pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;
/// Sabine's constant `24 ln(10) / c` for c = 343 m/s.
pub const SABINE_CONSTANT: f64 = 0.1611;
pub const MAX_ABSORPTION: f64 = 0.98;
pub const MIN_WALL_CLEARANCE: f64 = 0.1;
pub const FRACTIONAL_DELAY_TAPS: usize = 81;
const MAX_REJECTIONS: usize = 1000;
const TAIL_ENERGY_RATIO: f64 = 1e-6;

pub type Point = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct RoomConfig {
    pub dimensions: Point,
    pub source: Point,
    pub mic: Point,
    pub rt60: f64,
    pub max_order: u32,
    pub speed_of_sound: f64,
}

impl RoomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.dimensions.iter().any(|&d| !(d.is_finite() && d > 0.0)) {
            return bad(format!("room dimensions must be positive, got {:?}", self.dimensions));
        }
        if !(self.rt60.is_finite() && self.rt60 > 0.0) {
            return bad(format!("rt60 must be positive, got {}", self.rt60));
        }
        if !(self.speed_of_sound.is_finite() && self.speed_of_sound > 0.0) {
            return bad(format!("speed of sound must be positive, got {}", self.speed_of_sound));
        }
        for (name, p) in [("source", &self.source), ("mic", &self.mic)] {
            for axis in 0..3 {
                let clearance = p[axis].min(self.dimensions[axis] - p[axis]);
                if !(clearance >= MIN_WALL_CLEARANCE) {
                    return bad(format!("{name} position {p:?} is within {MIN_WALL_CLEARANCE} m of a wall"));
                }
            }
        }
        if distance(&self.source, &self.mic) == 0.0 {
            return bad("source and microphone coincide".into());
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.dimensions.iter().product()
    }

    pub fn surface_area(&self) -> f64 {
        let [x, y, z] = self.dimensions;
        2.0 * (x * y + x * z + y * z)
    }

    /// Length over width-or-height, largest over smallest dimension.
    pub fn aspect_ratio(&self) -> f64 {
        let max = self.dimensions.iter().copied().fold(f64::MIN, f64::max);
        let min = self.dimensions.iter().copied().fold(f64::MAX, f64::min);
        max / min
    }
}

fn distance(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Uniform ranges for every [`RoomConfig`] field.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomDistribution {
    pub dimensions: [(f64, f64); 3],
    /// Minimum distance from every wall for source and microphone.
    pub wall_margin: f64,
    pub rt60: (f64, f64),
    pub max_order: u32,
    pub speed_of_sound: f64,
}

impl Default for RoomDistribution {
    fn default() -> Self {
        Self {
            dimensions: [(3.0, 10.0), (3.0, 8.0), (2.5, 4.0)],
            wall_margin: 0.5,
            rt60: (0.2, 0.5),
            max_order: 10,
            speed_of_sound: DEFAULT_SPEED_OF_SOUND,
        }
    }
}

impl RoomDistribution {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !self.dimensions.iter().all(|&r| ordered(r) && r.0 > 0.0) {
            return Err(Error::Distribution(format!("bad dimension ranges {:?}", self.dimensions)));
        }
        if !(ordered(self.rt60) && self.rt60.0 > 0.0) {
            return Err(Error::Distribution(format!("bad rt60 range {:?}", self.rt60)));
        }
        if !(self.wall_margin.is_finite() && self.wall_margin >= MIN_WALL_CLEARANCE) {
            return Err(Error::Distribution(format!(
                "wall margin {} is below the {MIN_WALL_CLEARANCE} m minimum",
                self.wall_margin
            )));
        }
        if !(self.speed_of_sound.is_finite() && self.speed_of_sound > 0.0) {
            return Err(Error::Distribution("speed of sound must be positive".into()));
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Draws one room, rejecting configurations that break [`RoomConfig`]
/// invariants or whose RT60 is unreachable.
pub fn sample_room<R: Rng>(d: &RoomDistribution, rng: &mut R) -> Result<RoomConfig> {
    d.validate()?;
    for _ in 0..MAX_REJECTIONS {
        let dimensions = [uniform(rng, d.dimensions[0]), uniform(rng, d.dimensions[1]), uniform(rng, d.dimensions[2])];
        let mut place = || {
            let mut p = [0.0; 3];
            for axis in 0..3 {
                p[axis] = uniform(rng, (d.wall_margin, dimensions[axis] - d.wall_margin));
            }
            p
        };
        if dimensions.iter().any(|&l| l < 2.0 * d.wall_margin) {
            continue;
        }
        let source = place();
        let mic = place();
        let room = RoomConfig {
            dimensions,
            source,
            mic,
            rt60: uniform(rng, d.rt60),
            max_order: d.max_order,
            speed_of_sound: d.speed_of_sound,
        };
        if room.validate().is_ok() && rt60_to_reflection(&room).is_ok() {
            return Ok(room);
        }
    }
    Err(Error::Distribution(format!("no valid room after {MAX_REJECTIONS} draws")))
}

/// Sabine inversion: absorption `a = 0.1611 V / (S rt60)` shared by all
/// walls, reflection coefficient `sqrt(1 - a)`.
pub fn rt60_to_reflection(room: &RoomConfig) -> Result<f64> {
    let absorption = SABINE_CONSTANT * room.volume() / (room.surface_area() * room.rt60);
    if !(absorption > 0.0 && absorption <= MAX_ABSORPTION) {
        return Err(Error::InfeasibleRt60 { rt60: room.rt60, absorption });
    }
    Ok((1.0 - absorption).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSource {
    pub position: Point,
    pub reflections: u32,
}

/// Every mirror image of the source with at most `max_order` wall
/// reflections, the direct path included.
pub fn image_sources(room: &RoomConfig) -> Vec<ImageSource> {
    let order = room.max_order as i64;
    let mut out = Vec::new();
    // Per axis: images at (1 - 2q) s + 2 n L with |n - q| + |n| reflections.
    let axis_images = |axis: usize| {
        let mut v = Vec::new();
        for n in -order..=order {
            for q in 0..=1i64 {
                let count = (n - q).unsigned_abs() + n.unsigned_abs();
                if count as i64 <= order {
                    let pos = (1 - 2 * q) as f64 * room.source[axis] + 2.0 * n as f64 * room.dimensions[axis];
                    v.push((pos, count as u32));
                }
            }
        }
        v
    };
    let xs = axis_images(0);
    let ys = axis_images(1);
    let zs = axis_images(2);
    for &(x, cx) in &xs {
        for &(y, cy) in &ys {
            if cx + cy > room.max_order {
                continue;
            }
            for &(z, cz) in &zs {
                let reflections = cx + cy + cz;
                if reflections <= room.max_order {
                    out.push(ImageSource { position: [x, y, z], reflections });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    taps: Vec<f64>,
    sample_rate: u32,
}

impl Rir {
    pub fn new(taps: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::EmptyFilter);
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidParameter("impulse response has non-finite taps".into()));
        }
        if taps.iter().all(|&t| t == 0.0) {
            return Err(Error::InvalidParameter("impulse response is all zero".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidParameter("sample rate must be positive".into()));
        }
        Ok(Self { taps, sample_rate })
    }

    /// A unit impulse at lag zero: the transformation that changes nothing.
    pub fn identity(sample_rate: u32) -> Self {
        Self { taps: vec![1.0], sample_rate }
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum()
    }

    /// Fraction of the energy inside the first `n` taps.
    pub fn energy_fraction_within(&self, n: usize) -> f64 {
        let head: f64 = self.taps.iter().take(n).map(|t| t * t).sum();
        head / self.energy()
    }
}

fn fractional_delay_kernel(frac_center: f64, out: &mut [f64; FRACTIONAL_DELAY_TAPS]) {
    let half = (FRACTIONAL_DELAY_TAPS / 2) as f64;
    let width = FRACTIONAL_DELAY_TAPS as f64;
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 - half - frac_center;
        let window = if t.abs() < width / 2.0 { 0.5 * (1.0 + (2.0 * PI * t / width).cos()) } else { 0.0 };
        let sinc = if t == 0.0 { 1.0 } else { (PI * t).sin() / (PI * t) };
        *o = window * sinc;
    }
}

/// Image-source impulse response, truncated once the remaining tail holds
/// less than a millionth (-60 dB) of the total energy.
pub fn image_source_rir(room: &RoomConfig, sample_rate: u32) -> Result<Rir> {
    room.validate()?;
    let beta = rt60_to_reflection(room)?;
    let fs = f64::from(sample_rate);
    let sources = image_sources(room);

    let half = FRACTIONAL_DELAY_TAPS / 2;
    let max_delay = sources
        .iter()
        .map(|s| distance(&s.position, &room.mic) / room.speed_of_sound * fs)
        .fold(0.0, f64::max);
    let mut taps = vec![0.0; max_delay.ceil() as usize + half + 2];
    let mut kernel = [0.0; FRACTIONAL_DELAY_TAPS];
    for s in &sources {
        let d = distance(&s.position, &room.mic);
        let delay = d / room.speed_of_sound * fs;
        let gain = beta.powi(s.reflections as i32) / (4.0 * PI * d);
        let whole = delay.round();
        fractional_delay_kernel(delay - whole, &mut kernel);
        let first = whole as i64 - half as i64;
        for (i, k) in kernel.iter().enumerate() {
            let idx = first + i as i64;
            if idx >= 0 && (idx as usize) < taps.len() {
                taps[idx as usize] += gain * k;
            }
        }
    }

    let total: f64 = taps.iter().map(|t| t * t).sum();
    let mut tail = 0.0;
    let mut end = taps.len();
    for (i, t) in taps.iter().enumerate().rev() {
        tail += t * t;
        if tail > TAIL_ENERGY_RATIO * total {
            end = i + 1;
            break;
        }
    }
    taps.truncate(end);
    Rir::new(taps, sample_rate)
}

/// Reverberates `x` with `r`, keeping the original length.
pub fn apply_reverb(x: &Waveform, r: &Rir) -> Result<Waveform> {
    convolve(x, r)
}

/// Reverberation time estimated from the Schroeder energy decay curve by a
/// least-squares line through the -5 dB..-25 dB span, extrapolated to
/// -60 dB.
pub fn schroeder_rt60(r: &Rir) -> Option<f64> {
    let fs = f64::from(r.sample_rate());
    let mut edc: Vec<f64> = Vec::with_capacity(r.len());
    let mut acc = 0.0;
    for t in r.taps().iter().rev() {
        acc += t * t;
        edc.push(acc);
    }
    edc.reverse();
    let total = edc[0];
    if total <= 0.0 {
        return None;
    }
    let (mut n, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, e) in edc.iter().enumerate() {
        let db = 10.0 * (e / total).log10();
        if db <= -5.0 && db >= -25.0 {
            let t = i as f64 / fs;
            n += 1.0;
            sx += t;
            sy += db;
            sxx += t * t;
            sxy += t * db;
        }
    }
    if n < 2.0 {
        return None;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    (slope < 0.0).then(|| -60.0 / slope)
}

/// Per-frame relative error `|S(x * r) - S(x) R| / |S(x * r)|` of treating
/// reverberation as a bin-wise product, where `S` is the STFT and `R` the
/// window-length DFT of the taps. Frames where the reverberant signal is
/// silent score 0.
pub fn spectral_product_error(x: &Waveform, r: &Rir, c: &StftConfig) -> Result<Vec<f64>> {
    let n = c.window_size();
    if r.len() > n {
        return Err(Error::InvalidParameter(format!("filter of {} taps is longer than the {n}-point window", r.len())));
    }
    let plan = StftPlan::new(c.clone());
    let dry = plan.forward(x.samples())?;
    let wet = plan.forward(convolve(x, r)?.samples())?;
    let mut spectrum: Vec<Complex64> = r.taps().iter().map(|&t| Complex64::new(t, 0.0)).collect();
    spectrum.resize(n, Complex64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n).process(&mut spectrum);
    Ok(dry
        .frames
        .iter()
        .zip(&wet.frames)
        .map(|(d, w)| {
            let (mut err, mut norm) = (0.0, 0.0);
            for ((a, b), h) in d.iter().zip(w).zip(&spectrum) {
                err += (b - a * h).norm_sqr();
                norm += b.norm_sqr();
            }
            if norm > 0.0 {
                (err / norm).sqrt()
            } else if err > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .collect())
}

/// Direct-path arrival in samples.
pub fn direct_path_delay(room: &RoomConfig, sample_rate: u32) -> f64 {
    distance(&room.source, &room.mic) / room.speed_of_sound * f64::from(sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cube_room() -> RoomConfig {
        RoomConfig {
            dimensions: [5.0, 5.0, 5.0],
            source: [1.0, 2.5, 2.5],
            mic: [4.43, 2.5, 2.5],
            rt60: 0.32,
            max_order: 0,
            speed_of_sound: 343.0,
        }
    }

    #[test]
    fn sabine_inversion() {
        let room = cube_room();
        let beta = rt60_to_reflection(&room).unwrap();
        let a: f64 = 0.1611 * 125.0 / (150.0 * 0.32);
        assert!((a - 0.41953125).abs() < 1e-12);
        assert!((beta - (1.0 - a).sqrt()).abs() < 1e-12);
        assert!((beta - 0.7619).abs() < 1e-4);

        let doubled = RoomConfig { rt60: 0.64, ..room.clone() };
        let a2 = 1.0 - rt60_to_reflection(&doubled).unwrap().powi(2);
        assert!((a2 - a / 2.0).abs() < 1e-12);

        let dead = RoomConfig { rt60: 0.05, ..room };
        assert!(matches!(rt60_to_reflection(&dead), Err(Error::InfeasibleRt60 { .. })));
    }

    #[test]
    fn direct_path_only() {
        let room = cube_room();
        assert_eq!(image_sources(&room).len(), 1);
        let rir = image_source_rir(&room, 16_000).unwrap();
        let peak = (0..rir.len()).max_by(|&a, &b| rir.taps()[a].abs().total_cmp(&rir.taps()[b].abs())).unwrap();
        assert_eq!(peak, 160);
        assert!((rir.taps()[160] - 1.0 / (4.0 * PI * 3.43)).abs() < 1e-12);
        // Integer delay: the sinc vanishes at every other integer lag.
        assert!(rir.taps()[..160].iter().all(|t| t.abs() < 1e-15));
    }

    #[test]
    fn first_order_adds_one_image_per_wall() {
        let room = RoomConfig { max_order: 1, ..cube_room() };
        let images = image_sources(&room);
        assert_eq!(images.len(), 7);
        assert_eq!(images.iter().filter(|s| s.reflections == 1).count(), 6);
        let mirrored_x: Vec<f64> = images.iter().map(|s| s.position[0]).collect();
        assert!(mirrored_x.contains(&-1.0));
        assert!(mirrored_x.contains(&9.0));
    }

    #[test]
    fn image_count_grows_with_order() {
        let mut prev = 0;
        for order in 0..6 {
            let n = image_sources(&RoomConfig { max_order: order, ..cube_room() }).len();
            assert!(n > prev);
            prev = n;
        }
    }

    #[test]
    fn rir_is_deterministic_and_starts_at_direct_path() {
        let room = RoomConfig { max_order: 6, ..cube_room() };
        let a = image_source_rir(&room, 16_000).unwrap();
        let b = image_source_rir(&room, 16_000).unwrap();
        assert_eq!(a, b);
        let first = a.taps().iter().position(|t| t.abs() > 1e-9).unwrap();
        assert!((first as f64 - direct_path_delay(&room, 16_000)).abs() <= 1.0);
    }

    #[test]
    fn invalid_rooms_are_rejected() {
        let near_wall = RoomConfig { source: [0.05, 2.0, 2.0], ..cube_room() };
        assert!(near_wall.validate().is_err());
        let same = RoomConfig { mic: [1.0, 2.5, 2.5], ..cube_room() };
        assert!(same.validate().is_err());
        let flat = RoomConfig { dimensions: [5.0, 0.0, 5.0], ..cube_room() };
        assert!(flat.validate().is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_valid() {
        let d = RoomDistribution::default();
        let a = sample_room(&d, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_room(&d, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let r = sample_room(&d, &mut rng).unwrap();
            r.validate().unwrap();
            for axis in 0..3 {
                assert!(r.dimensions[axis] >= d.dimensions[axis].0 && r.dimensions[axis] <= d.dimensions[axis].1);
                assert!(r.source[axis] >= 0.5 && r.mic[axis] >= 0.5);
            }
            assert!(r.rt60 >= 0.2 && r.rt60 <= 0.5);
        }
    }

    #[test]
    fn point_mass_distribution() {
        let d = RoomDistribution {
            dimensions: [(4.0, 4.0), (3.0, 3.0), (3.0, 3.0)],
            wall_margin: 1.5,
            rt60: (0.3, 0.3),
            max_order: 3,
            speed_of_sound: 343.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let first = sample_room(&d, &mut rng).unwrap();
        assert_eq!(first.dimensions, [4.0, 3.0, 3.0]);
        assert_eq!(first.rt60, 0.3);
        // Positions are pinned on the axes where the margin leaves no room.
        for _ in 0..10 {
            let r = sample_room(&d, &mut rng).unwrap();
            assert_eq!(r.dimensions, first.dimensions);
            assert_eq!(r.source[1], 1.5);
            assert_eq!(r.mic[2], 1.5);
        }
    }

    #[test]
    fn impossible_distribution_errors() {
        // Tiny room with a long margin: every draw collides.
        let d = RoomDistribution {
            dimensions: [(1.0, 1.0), (1.0, 1.0), (1.0, 1.0)],
            wall_margin: 0.5,
            rt60: (0.3, 0.3),
            max_order: 1,
            speed_of_sound: 343.0,
        };
        assert!(matches!(sample_room(&d, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Distribution(_))));
    }

    #[test]
    fn unit_impulse_has_no_product_error() {
        let c = StftConfig::psychoacoustic();
        let x = Waveform::new((0..6000).map(|i| ((i * 37 % 101) as f64) - 50.0).collect(), 16000).unwrap();
        let err = spectral_product_error(&x, &Rir::identity(16000), &c).unwrap();
        assert!(err.iter().all(|&e| e < 1e-12), "{err:?}");
        let long = Rir::new(vec![0.5; 3000], 16000).unwrap();
        assert!(spectral_product_error(&x, &long, &c).is_err());
    }

    #[test]
    fn reverb_is_linear_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let room = sample_room(&RoomDistribution::default(), &mut rng).unwrap();
        let rir = image_source_rir(&room, 16_000).unwrap();
        let x = Waveform::new((0..4000).map(|_| rng.gen_range(-1000.0..1000.0)).collect(), 16_000).unwrap();
        let y = apply_reverb(&x, &rir).unwrap();
        assert_eq!(y.len(), x.len());

        let l1: f64 = rir.taps().iter().map(|t| t.abs()).sum();
        let ex: f64 = x.samples().iter().map(|v| v * v).sum();
        let ey: f64 = y.samples().iter().map(|v| v * v).sum();
        assert!(ey <= ex * l1 * l1);

        let scaled = x.with_samples(x.samples().iter().map(|v| 3.0 * v).collect()).unwrap();
        let ys = apply_reverb(&scaled, &rir).unwrap();
        for (a, b) in ys.samples().iter().zip(y.samples()) {
            assert!((a - 3.0 * b).abs() < 1e-9 * (1.0 + b.abs()));
        }

        let other_rate = Rir::new(vec![1.0], 8_000).unwrap();
        assert!(matches!(apply_reverb(&x, &other_rate), Err(Error::RateMismatch { .. })));
    }
}
