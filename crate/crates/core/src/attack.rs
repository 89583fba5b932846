//! Targeted perturbation search: the bounded sign-gradient stage, the
//! masking-aware refinement stage, and their reverberation-robust
//! counterparts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{clip_in_place, max_abs, FftConvolver, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::psycho::ImperceptibilityLoss;
use crate::recognizer::{Recognizer, Transcription};
use crate::room::{image_source_rir, sample_room, Rir, RoomDistribution};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adaptive-moment optimiser state for one parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        Self { cfg, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        let AdamConfig { beta1, beta2, epsilon } = self.cfg;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Config {
    pub lr: f64,
    pub iterations: usize,
    pub epsilon_init: f64,
    pub epsilon_decay: f64,
    pub check_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self { lr: 100.0, iterations: 1000, epsilon_init: 2000.0, epsilon_decay: 0.8, check_every: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Config {
    pub lr: f64,
    pub lr_late: f64,
    /// Iterations after which `lr_late` replaces `lr`.
    pub lr_drop_after: usize,
    pub iterations: usize,
    pub alpha_init: f64,
    pub alpha_up: f64,
    pub alpha_up_every: usize,
    pub alpha_down: f64,
    pub alpha_down_every: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lr: 1.0,
            lr_late: 0.1,
            lr_drop_after: 3000,
            iterations: 4000,
            alpha_init: 0.05,
            alpha_up: 1.2,
            alpha_up_every: 20,
            alpha_down: 0.8,
            alpha_down_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustConfig {
    pub lr1: f64,
    pub iterations1: usize,
    pub lr2: f64,
    pub iterations2: usize,
    /// Added to the stage-one bound to get the stage-two bound.
    pub delta: f64,
    /// Rooms drawn for every stage-two success check; all must be fooled.
    pub rooms_per_check: usize,
    pub check_every: usize,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self { lr1: 50.0, iterations1: 2000, lr2: 5.0, iterations2: 4000, delta: 300.0, rooms_per_check: 10, check_every: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseConfig {
    pub alpha_init: f64,
    pub lr: f64,
    pub iterations: usize,
    /// Rooms out of `rooms_per_check` that must be fooled for a success.
    pub required: usize,
    pub alpha_up: f64,
    pub alpha_down: f64,
    pub alpha_down_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpRobustConfig {
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
    pub rooms_per_check: usize,
    pub check_every: usize,
    /// Fraction of validation rooms beyond which extra room successes stop
    /// outranking a lower masking loss when picking the returned candidate.
    pub selection_floor: f64,
}

impl Default for ImpRobustConfig {
    fn default() -> Self {
        Self {
            phase1: PhaseConfig {
                alpha_init: 0.01,
                lr: 1.0,
                iterations: 4000,
                required: 4,
                alpha_up: 2.0,
                alpha_down: 0.5,
                alpha_down_every: 50,
            },
            phase2: PhaseConfig {
                alpha_init: 5e-5,
                lr: 1.5,
                iterations: 6000,
                required: 8,
                alpha_up: 1.2,
                alpha_down: 0.8,
                alpha_down_every: 50,
            },
            rooms_per_check: 10,
            check_every: 10,
            selection_floor: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttackConfig {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub robust: RobustConfig,
    pub imp_robust: ImpRobustConfig,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
            }
        };
        let count = |name: &str, v: usize| {
            if v > 0 {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be at least 1")))
            }
        };
        let s1 = &self.stage1;
        positive("stage1.lr", s1.lr)?;
        positive("stage1.epsilon", s1.epsilon_init)?;
        positive("stage1.epsilon_decay", s1.epsilon_decay)?;
        count("stage1.iterations", s1.iterations)?;
        count("stage1.check_every", s1.check_every)?;
        let s2 = &self.stage2;
        positive("stage2.lr", s2.lr)?;
        positive("stage2.lr_late", s2.lr_late)?;
        positive("stage2.alpha", s2.alpha_init)?;
        positive("stage2.alpha_up", s2.alpha_up)?;
        positive("stage2.alpha_down", s2.alpha_down)?;
        count("stage2.iterations", s2.iterations)?;
        count("stage2.alpha_up_every", s2.alpha_up_every)?;
        count("stage2.alpha_down_every", s2.alpha_down_every)?;
        let r = &self.robust;
        positive("robust.lr1", r.lr1)?;
        positive("robust.lr2", r.lr2)?;
        positive("robust.delta", r.delta)?;
        count("robust.iterations1", r.iterations1)?;
        count("robust.iterations2", r.iterations2)?;
        count("robust.rooms_per_check", r.rooms_per_check)?;
        count("robust.check_every", r.check_every)?;
        let ir = &self.imp_robust;
        for (name, p) in [("imp_robust.phase1", &ir.phase1), ("imp_robust.phase2", &ir.phase2)] {
            if !(p.alpha_init.is_finite() && p.alpha_init >= 0.0) {
                return Err(Error::InvalidParameter(format!("{name}.alpha must be non-negative")));
            }
            positive(&format!("{name}.lr"), p.lr)?;
            positive(&format!("{name}.alpha_up"), p.alpha_up)?;
            positive(&format!("{name}.alpha_down"), p.alpha_down)?;
            count(&format!("{name}.iterations"), p.iterations)?;
            count(&format!("{name}.alpha_down_every"), p.alpha_down_every)?;
            if p.required == 0 || p.required > ir.rooms_per_check {
                return Err(Error::InvalidParameter(format!(
                    "{name}.required must be in 1..={}",
                    ir.rooms_per_check
                )));
            }
        }
        count("imp_robust.rooms_per_check", ir.rooms_per_check)?;
        count("imp_robust.check_every", ir.check_every)?;
        if !(0.0..=1.0).contains(&ir.selection_floor) {
            return Err(Error::InvalidParameter("imp_robust.selection_floor must be in [0, 1]".into()));
        }
        positive("adam.beta1", self.adam.beta1)?;
        positive("adam.beta2", self.adam.beta2)?;
        positive("adam.epsilon", self.adam.epsilon)?;
        if self.adam.beta1 >= 1.0 || self.adam.beta2 >= 1.0 {
            return Err(Error::InvalidParameter("adam betas must be below 1".into()));
        }
        Ok(())
    }
}

/// One optimisation step as recorded in an attack history.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// 1-based, counting on across consecutive stages.
    pub iter: usize,
    pub loss_net: f64,
    /// `None` where the stage does not evaluate the masking loss.
    pub loss_theta: Option<f64>,
    /// Bound in force for this step; infinite when unbounded.
    pub epsilon: f64,
    /// Zero where the stage has no balance weight.
    pub alpha: f64,
    /// `None` on iterations without a success check.
    pub success: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoomTally {
    pub fooled: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub delta: Waveform,
    /// Max-norm bound the returned perturbation satisfies; infinite for
    /// unbounded modes.
    pub epsilon_final: f64,
    pub alpha_final: f64,
    /// Whether the returned perturbation passed the mode's success test.
    pub success: bool,
    /// Validation-room tally of the returned perturbation (room modes).
    pub rooms: Option<RoomTally>,
    pub history: Vec<IterationRecord>,
    pub imperceptibility_loss_final: f64,
    /// Set when no iterate qualified and the initial perturbation was
    /// returned as is.
    pub fell_back: bool,
}

// ---------------------------------------------------------------------------
// Rooms

/// A fixed RIR, ready to be applied to signals of one length.
#[derive(Debug, Clone)]
enum Reverb {
    Identity,
    Fft(FftConvolver),
}

impl Reverb {
    fn new(r: &Rir, len: usize) -> Result<Self> {
        if r.taps() == [1.0] {
            Ok(Self::Identity)
        } else {
            Ok(Self::Fft(FftConvolver::new(r.taps(), len)?))
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Self::Identity => x.to_vec(),
            Self::Fft(c) => c.apply(x),
        }
    }

    fn adjoint(&self, g: Vec<f64>) -> Vec<f64> {
        match self {
            Self::Identity => g,
            Self::Fft(c) => c.adjoint(&g),
        }
    }
}

/// Seed streams kept apart so training, validation and test rooms never
/// share draws.
mod stream {
    pub const TRAINING_ROOMS: u64 = 1;
    pub const VALIDATION_ROOMS: u64 = 2;
    pub const STEPS: u64 = 3;
    pub const CHECKS: u64 = 4;
    pub const TEST_ROOMS: u64 = 5;
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws `count` rooms from `d` and renders their impulse responses.
pub fn draw_rirs(d: &RoomDistribution, count: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Result<Vec<Rir>> {
    (0..count).map(|_| image_source_rir(&sample_room(d, rng)?, sample_rate)).collect()
}

/// The transformations a robust attack trains against and is selected on:
/// a pool of training rooms and a disjoint set of validation rooms.
#[derive(Debug, Clone)]
pub struct Rooms {
    pub training: Vec<Rir>,
    pub validation: Vec<Rir>,
}

impl Rooms {
    /// The degenerate distribution: every draw is the identity response.
    pub fn identity(sample_rate: u32) -> Self {
        Self { training: vec![Rir::identity(sample_rate)], validation: vec![Rir::identity(sample_rate)] }
    }

    pub fn sample(
        d: &RoomDistribution,
        training: usize,
        validation: usize,
        seed: u64,
        sample_rate: u32,
    ) -> Result<Self> {
        if training == 0 || validation == 0 {
            return Err(Error::InvalidParameter("room sets must not be empty".into()));
        }
        Ok(Self {
            training: draw_rirs(d, training, sample_rate, &mut rng_for(seed, stream::TRAINING_ROOMS))?,
            validation: draw_rirs(d, validation, sample_rate, &mut rng_for(seed, stream::VALIDATION_ROOMS))?,
        })
    }

    fn prepare(&self, len: usize, sample_rate: u32) -> Result<PreparedRooms> {
        let build = |set: &[Rir]| -> Result<Vec<Reverb>> {
            set.iter()
                .map(|r| {
                    if r.sample_rate() != sample_rate {
                        return Err(Error::RateMismatch { left: sample_rate, right: r.sample_rate() });
                    }
                    Reverb::new(r, len)
                })
                .collect()
        };
        Ok(PreparedRooms { training: build(&self.training)?, validation: build(&self.validation)? })
    }
}

struct PreparedRooms {
    training: Vec<Reverb>,
    validation: Vec<Reverb>,
}

impl PreparedRooms {
    fn draw<'a>(&'a self, rng: &mut ChaCha8Rng) -> &'a Reverb {
        &self.training[rng.gen_range(0..self.training.len())]
    }
}

// ---------------------------------------------------------------------------
// Shared helpers

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add(x: &[f64], d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + b).collect()
}

fn fools(model: &dyn Recognizer, input: &[f64], y: &Transcription) -> Result<bool> {
    Ok(model.transcribe(input)?.tokens == y.tokens)
}

fn all_fooled(model: &dyn Recognizer, rooms: &[&Reverb], xd: &[f64], y: &Transcription) -> Result<bool> {
    for r in rooms {
        if !fools(model, &r.apply(xd), y)? {
            return Ok(false);
        }
    }
    Ok(true)
}

fn count_fooled(model: &dyn Recognizer, rooms: &[Reverb], xd: &[f64], y: &Transcription) -> Result<usize> {
    let mut n = 0;
    for r in rooms {
        if fools(model, &r.apply(xd), y)? {
            n += 1;
        }
    }
    Ok(n)
}

/// Rejects targets the model can never emit and targets it already emits.
fn check_attack_inputs(model: &dyn Recognizer, x: &Waveform, y: &Transcription) -> Result<()> {
    model.check_target(y)?;
    if x.sample_rate() != model.sample_rate() {
        return Err(Error::RateMismatch { left: x.sample_rate(), right: model.sample_rate() });
    }
    if fools(model, x.samples(), y)? {
        return Err(Error::Precondition(format!("the clean audio already transcribes as {:?}", y.text)));
    }
    Ok(())
}

fn masking_loss(x: &Waveform) -> Result<ImperceptibilityLoss> {
    ImperceptibilityLoss::for_signal(x, &StftConfig::psychoacoustic())
}

/// Outcome of a sign-gradient stage with the shrinking bound.
struct BoundedRun {
    best: Option<(Vec<f64>, f64)>,
    history: Vec<IterationRecord>,
}

/// The shared bounded sign-gradient loop. `grad_at` returns the loss and
/// gradient for the current perturbation; `check` decides success.
fn bounded_sign_descent(
    len: usize,
    cfg: &Stage1Config,
    lr: f64,
    iterations: usize,
    first_iter: usize,
    mut grad_at: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    mut check: impl FnMut(&[f64]) -> Result<bool>,
) -> Result<BoundedRun> {
    let mut delta = vec![0.0; len];
    let mut eps = cfg.epsilon_init;
    let mut best = None;
    let mut history = Vec::with_capacity(iterations);
    for i in 1..=iterations {
        let (loss, grad) = grad_at(&delta)?;
        for (d, g) in delta.iter_mut().zip(&grad) {
            *d -= lr * sign(*g);
        }
        clip_in_place(&mut delta, eps);
        let bound = eps;
        let mut success = None;
        if i % cfg.check_every == 0 {
            let ok = check(&delta)?;
            if ok {
                let m = max_abs(&delta);
                if eps > m {
                    eps = m;
                }
                best = Some((delta.clone(), eps));
                eps *= cfg.epsilon_decay;
            }
            success = Some(ok);
        }
        history.push(IterationRecord {
            iter: first_iter + i,
            loss_net: loss,
            loss_theta: None,
            epsilon: bound,
            alpha: 0.0,
            success,
        });
    }
    Ok(BoundedRun { best, history })
}

fn failure(x: &Waveform, history: Vec<IterationRecord>, eps: f64, theta: &ImperceptibilityLoss) -> Result<AttackResult> {
    let delta = vec![0.0; x.len()];
    Ok(AttackResult {
        imperceptibility_loss_final: theta.value(&delta)?,
        delta: x.with_samples(delta)?,
        epsilon_final: eps,
        alpha_final: 0.0,
        success: false,
        rooms: None,
        history,
        fell_back: false,
    })
}

// ---------------------------------------------------------------------------
// Attacks

/// Bounded sign-gradient search for a perturbation that makes `model`
/// transcribe `x + delta` as `y`. The bound shrinks every time a check
/// succeeds; the last successful perturbation is returned.
pub fn stage1_attack(x: &Waveform, y: &Transcription, model: &dyn Recognizer, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    check_attack_inputs(model, x, y)?;
    let theta = masking_loss(x)?;
    let xs = x.samples();
    let s1 = &cfg.stage1;
    let run = bounded_sign_descent(
        x.len(),
        s1,
        s1.lr,
        s1.iterations,
        0,
        |d| model.loss_and_gradient(&add(xs, d), y),
        |d| fools(model, &add(xs, d), y),
    )?;
    match run.best {
        Some((delta, eps)) => Ok(AttackResult {
            imperceptibility_loss_final: theta.value(&delta)?,
            delta: x.with_samples(delta)?,
            epsilon_final: eps,
            alpha_final: 0.0,
            success: true,
            rooms: None,
            history: run.history,
            fell_back: false,
        }),
        None => failure(x, run.history, s1.epsilon_init, &theta),
    }
}

/// Unbounded refinement of a successful perturbation, trading recognition
/// loss against the masking loss. Returns the successful iterate with the
/// lowest masking loss.
pub fn stage2_imperceptible(
    x: &Waveform,
    y: &Transcription,
    model: &dyn Recognizer,
    init: &Waveform,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    model.check_target(y)?;
    if init.len() != x.len() {
        return Err(Error::Shape(format!("initial perturbation has {} samples, audio {}", init.len(), x.len())));
    }
    let s2 = &cfg.stage2;
    let theta = masking_loss(x)?;
    let xs = x.samples();
    let mut delta = init.samples().to_vec();
    let mut adam = Adam::new(cfg.adam.clone(), delta.len());
    let mut alpha = s2.alpha_init;

    let eval = |d: &[f64]| -> Result<(f64, Vec<f64>, bool, f64, Vec<f64>)> {
        let (ln, gn, text) = model.evaluate(&add(xs, d), y)?;
        let (lt, gt) = theta.value_and_gradient(d)?;
        Ok((ln, gn, text.tokens == y.tokens, lt, gt))
    };

    let (_, mut gn, ok0, mut lt, mut gt) = eval(&delta)?;
    let mut best: Option<(Vec<f64>, f64)> = ok0.then(|| (delta.clone(), lt));
    let mut history = Vec::with_capacity(s2.iterations);
    let mut grad = vec![0.0; delta.len()];
    for i in 1..=s2.iterations {
        let lr = if i > s2.lr_drop_after { s2.lr_late } else { s2.lr };
        for ((g, a), b) in grad.iter_mut().zip(&gn).zip(&gt) {
            *g = a + alpha * b;
        }
        adam.step(&mut delta, &grad, lr);
        let (ln, ok);
        (ln, gn, ok, lt, gt) = eval(&delta)?;
        if ok && best.as_ref().map_or(true, |(_, l)| lt < *l) {
            best = Some((delta.clone(), lt));
        }
        let step_alpha = alpha;
        if i % s2.alpha_up_every == 0 && ok {
            alpha *= s2.alpha_up;
        }
        if i % s2.alpha_down_every == 0 && !ok {
            alpha *= s2.alpha_down;
        }
        history.push(IterationRecord {
            iter: i,
            loss_net: ln,
            loss_theta: Some(lt),
            epsilon: f64::INFINITY,
            alpha: step_alpha,
            success: Some(ok),
        });
    }
    let found = best.is_some();
    let (out, lt_out) = match best {
        Some(b) => b,
        None => {
            let d = init.samples().to_vec();
            let l = theta.value(&d)?;
            (d, l)
        }
    };
    Ok(AttackResult {
        delta: x.with_samples(out)?,
        epsilon_final: f64::INFINITY,
        alpha_final: alpha,
        success: found,
        rooms: None,
        history,
        imperceptibility_loss_final: lt_out,
        fell_back: !found,
    })
}

/// Two-stage attack over sampled rooms. Stage one is the bounded
/// sign-gradient search with one fresh training room per step; stage two
/// widens the bound by `robust.delta` and keeps going with Adam until every
/// room of a freshly drawn check set is fooled. Candidates are ranked by
/// how many validation rooms they fool.
pub fn robust_attack(
    x: &Waveform,
    y: &Transcription,
    model: &dyn Recognizer,
    rooms: &Rooms,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    check_attack_inputs(model, x, y)?;
    let theta = masking_loss(x)?;
    let prepared = rooms.prepare(x.len(), x.sample_rate())?;
    let xs = x.samples();
    let r = &cfg.robust;
    let mut steps = rng_for(cfg.seed, stream::STEPS);
    let mut checks = rng_for(cfg.seed, stream::CHECKS);

    let stage1 = Stage1Config { check_every: r.check_every, ..cfg.stage1.clone() };
    let run = {
        let steps = &mut steps;
        let checks = &mut checks;
        let prepared = &prepared;
        bounded_sign_descent(
            x.len(),
            &stage1,
            r.lr1,
            r.iterations1,
            0,
            move |d| {
                let room = prepared.draw(steps);
                let (l, g) = model.loss_and_gradient(&room.apply(&add(xs, d)), y)?;
                Ok((l, room.adjoint(g)))
            },
            move |d| fools(model, &prepared.draw(checks).apply(&add(xs, d)), y),
        )?
    };
    let mut history = run.history;
    let Some((delta_r, eps_r)) = run.best else {
        return failure(x, history, cfg.stage1.epsilon_init, &theta);
    };

    let eps2 = eps_r + r.delta;
    let n_val = prepared.validation.len();
    let mut best_count = count_fooled(model, &prepared.validation, &add(xs, &delta_r), y)?;
    let mut best = delta_r.clone();
    let mut delta = delta_r;
    let mut adam = Adam::new(cfg.adam.clone(), delta.len());
    for i in 1..=r.iterations2 {
        let room = prepared.draw(&mut steps);
        let (loss, g) = model.loss_and_gradient(&room.apply(&add(xs, &delta)), y)?;
        adam.step(&mut delta, &room.adjoint(g), r.lr2);
        clip_in_place(&mut delta, eps2);
        let mut success = None;
        if i % r.check_every == 0 {
            let xd = add(xs, &delta);
            let omega: Vec<&Reverb> = (0..r.rooms_per_check).map(|_| prepared.draw(&mut checks)).collect();
            let all = all_fooled(model, &omega, &xd, y)?;
            if all {
                let c = count_fooled(model, &prepared.validation, &xd, y)?;
                if c > best_count {
                    best_count = c;
                    best = delta.clone();
                }
            }
            success = Some(all);
        }
        history.push(IterationRecord {
            iter: r.iterations1 + i,
            loss_net: loss,
            loss_theta: None,
            epsilon: eps2,
            alpha: 0.0,
            success,
        });
    }
    Ok(AttackResult {
        imperceptibility_loss_final: theta.value(&best)?,
        delta: x.with_samples(best)?,
        epsilon_final: eps2,
        alpha_final: 0.0,
        success: true,
        rooms: Some(RoomTally { fooled: best_count, total: n_val }),
        history,
        fell_back: false,
    })
}

/// Refines a robust perturbation toward the masking threshold of the clean
/// audio while keeping room success, in two phases with different balance
/// schedules. Candidates are ranked by validation rooms fooled (capped at
/// `selection_floor` of the set) and then by masking loss.
pub fn imperceptible_robust_attack(
    x: &Waveform,
    y: &Transcription,
    model: &dyn Recognizer,
    rooms: &Rooms,
    init: &AttackResult,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    model.check_target(y)?;
    if !init.success {
        return Err(Error::Precondition("initial robust perturbation did not succeed".into()));
    }
    if init.delta.len() != x.len() {
        return Err(Error::Shape(format!("initial perturbation has {} samples, audio {}", init.delta.len(), x.len())));
    }
    let ir = &cfg.imp_robust;
    let theta = masking_loss(x)?;
    let prepared = rooms.prepare(x.len(), x.sample_rate())?;
    let xs = x.samples();
    let n_val = prepared.validation.len();
    let cap = (ir.selection_floor * n_val as f64).ceil() as usize;
    let mut steps = rng_for(cfg.seed, stream::STEPS);
    let mut checks = rng_for(cfg.seed, stream::CHECKS);

    let mut delta = init.delta.samples().to_vec();
    let init_count = count_fooled(model, &prepared.validation, &add(xs, &delta), y)?;
    let init_lt = theta.value(&delta)?;
    // (rank, masking loss, perturbation)
    let mut best = (init_count.min(cap), init_count, init_lt, delta.clone());
    let mut history = Vec::new();
    let mut offset = 0;
    let mut alpha_final = 0.0;

    for phase in [&ir.phase1, &ir.phase2] {
        let mut alpha = phase.alpha_init;
        let mut adam = Adam::new(cfg.adam.clone(), delta.len());
        let mut last_ok = false;
        let mut grad = vec![0.0; delta.len()];
        for i in 1..=phase.iterations {
            let room = prepared.draw(&mut steps);
            let (ln, gn) = model.loss_and_gradient(&room.apply(&add(xs, &delta)), y)?;
            let gn = room.adjoint(gn);
            let (lt, gt) = theta.value_and_gradient(&delta)?;
            for ((g, a), b) in grad.iter_mut().zip(&gn).zip(&gt) {
                *g = a + alpha * b;
            }
            let step_alpha = alpha;
            adam.step(&mut delta, &grad, phase.lr);

            let mut success = None;
            if i % ir.check_every == 0 {
                let xd = add(xs, &delta);
                let mut fooled = 0;
                for _ in 0..ir.rooms_per_check {
                    if fools(model, &prepared.draw(&mut checks).apply(&xd), y)? {
                        fooled += 1;
                    }
                }
                last_ok = fooled >= phase.required;
                if last_ok {
                    alpha *= phase.alpha_up;
                    let c = count_fooled(model, &prepared.validation, &xd, y)?;
                    let l = theta.value(&delta)?;
                    let rank = c.min(cap);
                    if rank > best.0 || (rank == best.0 && l < best.2) {
                        best = (rank, c, l, delta.clone());
                    }
                }
                success = Some(last_ok);
            }
            if i % phase.alpha_down_every == 0 && !last_ok {
                alpha *= phase.alpha_down;
            }
            history.push(IterationRecord {
                iter: offset + i,
                loss_net: ln,
                loss_theta: Some(lt),
                epsilon: f64::INFINITY,
                alpha: step_alpha,
                success,
            });
        }
        offset += phase.iterations;
        alpha_final = alpha;
    }
    let (_, count, lt, out) = best;
    let fell_back = out == init.delta.samples();
    Ok(AttackResult {
        epsilon_final: f64::INFINITY,
        delta: x.with_samples(out)?,
        alpha_final,
        success: true,
        rooms: Some(RoomTally { fooled: count, total: n_val }),
        history,
        imperceptibility_loss_final: lt,
        fell_back,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub clean_success: bool,
    pub rooms_fooled: usize,
    pub rooms_total: usize,
    pub max_abs: f64,
    pub loss_theta: f64,
}

/// Scores `delta` on the clean path and on `n_test_rooms` rooms drawn from
/// `distribution` with `seed` on a stream no attack draws from.
pub fn evaluate_attack(
    x: &Waveform,
    delta: &Waveform,
    y: &Transcription,
    model: &dyn Recognizer,
    distribution: &RoomDistribution,
    n_test_rooms: usize,
    seed: u64,
) -> Result<Evaluation> {
    if delta.len() != x.len() {
        return Err(Error::Shape(format!("perturbation has {} samples, audio {}", delta.len(), x.len())));
    }
    let xd = add(x.samples(), delta.samples());
    let rirs = draw_rirs(distribution, n_test_rooms, x.sample_rate(), &mut rng_for(seed, stream::TEST_ROOMS))?;
    let reverbs = rirs.iter().map(|r| Reverb::new(r, x.len())).collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        clean_success: fools(model, &xd, y)?,
        rooms_fooled: count_fooled(model, &reverbs, &xd, y)?,
        rooms_total: n_test_rooms,
        max_abs: delta.max_abs(),
        loss_theta: masking_loss(x)?.value(delta.samples())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recognizer::{align_target, collapse, Vocab};

    /// Quadratic stand-in recognizer: the input is cut into `SEGMENTS`
    /// equal parts and part `s` reads as token `round(mean_s / 100)`.
    struct Mock {
        vocab: Vocab,
    }

    const SEGMENTS: usize = 4;
    const UNIT: f64 = 100.0;

    impl Mock {
        fn new() -> Self {
            Self { vocab: Vocab::toy() }
        }

        fn segments(len: usize) -> Vec<(usize, usize)> {
            (0..SEGMENTS).map(|s| (s * len / SEGMENTS, (s + 1) * len / SEGMENTS)).collect()
        }

        fn means(x: &[f64]) -> Vec<f64> {
            Self::segments(x.len()).iter().map(|&(a, b)| x[a..b].iter().sum::<f64>() / (b - a) as f64).collect()
        }
    }

    impl Recognizer for Mock {
        fn vocab(&self) -> &Vocab {
            &self.vocab
        }

        fn sample_rate(&self) -> u32 {
            16_000
        }

        fn loss(&self, input: &[f64], target: &Transcription) -> Result<f64> {
            Ok(self.loss_and_gradient(input, target)?.0)
        }

        fn loss_and_gradient(&self, input: &[f64], target: &Transcription) -> Result<(f64, Vec<f64>)> {
            let want = align_target(target, SEGMENTS)?;
            let means = Self::means(input);
            let mut grad = vec![0.0; input.len()];
            let mut loss = 0.0;
            for (s, &(a, b)) in Self::segments(input.len()).iter().enumerate() {
                let r = means[s] - UNIT * want[s] as f64;
                loss += r * r / (UNIT * UNIT);
                for g in &mut grad[a..b] {
                    *g = 2.0 * r / (UNIT * UNIT) / (b - a) as f64;
                }
            }
            Ok((loss, grad))
        }

        fn transcribe(&self, input: &[f64]) -> Result<Transcription> {
            let top = (self.vocab.len() - 1) as f64;
            let frames: Vec<usize> =
                Self::means(input).iter().map(|m| (m / UNIT).round().clamp(0.0, top) as usize).collect();
            Transcription::from_tokens(collapse(&frames, 0), &self.vocab)
        }
    }

    fn clean() -> Waveform {
        // Loud, zero-mean: reads as silence everywhere.
        let s: Vec<f64> = (0..8192).map(|i| 3000.0 * (i as f64 * 0.3).sin()).collect();
        Waveform::new(s, 16_000).unwrap()
    }

    fn target(m: &Mock, text: &str) -> Transcription {
        Transcription::parse(text, m.vocab()).unwrap()
    }

    fn quick_cfg() -> AttackConfig {
        // Step sizes that do not divide the mock's token spacing, so sign
        // steps cannot hop over a token forever.
        let mut c = AttackConfig::default();
        c.stage1.lr = 30.0;
        c.robust.lr1 = 30.0;
        c.stage1.iterations = 60;
        c.stage2.iterations = 100;
        c.robust.iterations1 = 60;
        c.robust.iterations2 = 40;
        c.imp_robust.phase1.iterations = 50;
        c.imp_robust.phase2.iterations = 50;
        c
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut a = Adam::new(AdamConfig::default(), 2);
        let mut p = vec![1.0, 1.0];
        a.step(&mut p, &[3.0, -0.5], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn stage1_respects_and_shrinks_the_bound() {
        let m = Mock::new();
        let y = target(&m, "two three");
        let r = stage1_attack(&clean(), &y, &m, &quick_cfg()).unwrap();
        assert!(r.success);
        assert!(r.delta.max_abs() <= r.epsilon_final + 1e-9);
        let mut prev = f64::INFINITY;
        for h in &r.history {
            assert!(h.epsilon <= prev);
            prev = h.epsilon;
        }
        assert!(r.history.iter().filter(|h| h.success.is_some()).count() == 6);
        assert!(fools(&m, &add(clean().samples(), r.delta.samples()), &y).unwrap());
    }

    #[test]
    fn stage1_bound_trace_matches_hand_computation() {
        // "three" needs mean 400 in every segment of silent input; with
        // lr = 40 the first check at iteration 10 succeeds with
        // max|delta| = 400, so the returned bound is 400 and the running
        // bound becomes 320.
        let m = Mock::new();
        let y = target(&m, "three");
        let mut cfg = quick_cfg();
        cfg.stage1.lr = 40.0;
        cfg.stage1.iterations = 10;
        let x = Waveform::zeros(4096, 16_000);
        let r = stage1_attack(&x, &y, &m, &cfg).unwrap();
        assert!(r.success);
        assert_eq!(r.epsilon_final, 400.0);
        assert_eq!(r.history[9].epsilon, 2000.0);
    }

    #[test]
    fn bound_update_follows_the_two_step_rule() {
        // eps = 2000 and a success with max|delta| = 1500 leaves 1200.
        let mut eps: f64 = 2000.0;
        let m: f64 = 1500.0;
        if eps > m {
            eps = m;
        }
        eps *= Stage1Config::default().epsilon_decay;
        assert!((eps - 1200.0).abs() < 1e-9);
    }

    #[test]
    fn target_already_met_is_a_precondition_error() {
        let m = Mock::new();
        let x = Waveform::new(vec![400.0; 4096], 16_000).unwrap();
        let y = target(&m, "three");
        assert!(matches!(stage1_attack(&x, &y, &m, &quick_cfg()), Err(Error::Precondition(_))));
    }

    #[test]
    fn repeated_tokens_are_rejected() {
        let m = Mock::new();
        let y = target(&m, "two two");
        assert!(matches!(stage1_attack(&clean(), &y, &m, &quick_cfg()), Err(Error::Precondition(_))));
    }

    #[test]
    fn no_success_returns_a_failure_result() {
        let m = Mock::new();
        let y = target(&m, "nine");
        let mut cfg = quick_cfg();
        cfg.stage1.epsilon_init = 100.0;
        let r = stage1_attack(&clean(), &y, &m, &cfg).unwrap();
        assert!(!r.success);
        assert_eq!(r.history.len(), 60);
        assert_eq!(r.delta.max_abs(), 0.0);
    }

    #[test]
    fn stage2_alpha_trace() {
        // Every check succeeds for the mock once the mean is right, so after
        // 40 iterations alpha has been raised twice.
        let m = Mock::new();
        let x = clean();
        let y = target(&m, "two three");
        let steps: Vec<f64> =
            Mock::segments(x.len()).iter().zip([300.0, 300.0, 400.0, 400.0]).flat_map(|(&(a, b), v)| vec![v; b - a]).collect();
        let init = x.with_samples(steps).unwrap();
        let mut cfg = quick_cfg();
        cfg.stage2.iterations = 41;
        cfg.stage2.alpha_init = 1e-9;
        let r = stage2_imperceptible(&x, &y, &m, &init, &cfg).unwrap();
        assert!(r.history.iter().all(|h| h.success == Some(true)));
        assert_eq!(r.history[40].alpha, 1e-9 * 1.2 * 1.2);
        assert!((1e-9 * 1.2f64.powi(2) - r.history[40].alpha).abs() < 1e-24);
        assert!(r.success);
    }

    #[test]
    fn stage2_keeps_an_already_perfect_start() {
        // Zero masking loss is unbeatable under strict improvement.
        let m = Mock::new();
        let x = clean();
        let y = target(&m, "two three");
        let cfg = quick_cfg();
        let s1 = stage1_attack(&x, &y, &m, &cfg).unwrap();
        let theta = masking_loss(&x).unwrap();
        if theta.value(s1.delta.samples()).unwrap() == 0.0 {
            let r = stage2_imperceptible(&x, &y, &m, &s1.delta, &cfg).unwrap();
            assert_eq!(r.delta, s1.delta);
        }
        let quiet = x.with_samples(vec![0.0; x.len()]).unwrap();
        let y0 = target(&m, "one");
        // Zero perturbation fails the target, so nothing qualifies when
        // the loop cannot move far enough.
        let mut tiny = cfg.clone();
        tiny.stage2.iterations = 1;
        let r = stage2_imperceptible(&x, &y0, &m, &quiet, &tiny).unwrap();
        assert!(!r.success && r.fell_back);
        assert_eq!(r.delta, quiet);
    }

    #[test]
    fn stage2_returned_delta_is_the_best_successful_iterate() {
        let m = Mock::new();
        let x = clean();
        let y = target(&m, "two three");
        let cfg = quick_cfg();
        let s1 = stage1_attack(&x, &y, &m, &cfg).unwrap();
        let r = stage2_imperceptible(&x, &y, &m, &s1.delta, &cfg).unwrap();
        assert!(r.success);
        let best_seen = r
            .history
            .iter()
            .filter(|h| h.success == Some(true))
            .filter_map(|h| h.loss_theta)
            .fold(f64::INFINITY, f64::min);
        assert!(r.imperceptibility_loss_final <= best_seen);
        assert!(r.imperceptibility_loss_final <= s1.imperceptibility_loss_final);
    }

    #[test]
    fn identity_rooms_reduce_robust_stage1_to_stage1() {
        let m = Mock::new();
        let x = clean();
        let y = target(&m, "four");
        let mut cfg = quick_cfg();
        cfg.robust.lr1 = cfg.stage1.lr;
        cfg.robust.iterations1 = cfg.stage1.iterations;
        let plain = stage1_attack(&x, &y, &m, &cfg).unwrap();
        let robust = robust_attack(&x, &y, &m, &Rooms::identity(16_000), &cfg).unwrap();
        assert_eq!(plain.history[..], robust.history[..cfg.stage1.iterations]);
        assert_eq!(robust.epsilon_final, plain.epsilon_final + cfg.robust.delta);
        assert_eq!(robust.rooms, Some(RoomTally { fooled: 1, total: 1 }));
    }

    #[test]
    fn identity_rooms_with_zero_alpha_is_plain_adam_on_the_net_loss() {
        let m = Mock::new();
        let x = clean();
        let y = target(&m, "four");
        let mut cfg = quick_cfg();
        let rooms = Rooms::identity(16_000);
        let init = robust_attack(&x, &y, &m, &rooms, &cfg).unwrap();
        cfg.imp_robust.phase1.alpha_init = 0.0;
        cfg.imp_robust.phase1.iterations = 30;
        cfg.imp_robust.phase2.iterations = 1;
        let r = imperceptible_robust_attack(&x, &y, &m, &rooms, &init, &cfg).unwrap();

        let mut delta = init.delta.samples().to_vec();
        let mut adam = Adam::new(cfg.adam.clone(), delta.len());
        for (i, h) in r.history.iter().take(30).enumerate() {
            let (l, g) = m.loss_and_gradient(&add(x.samples(), &delta), &y).unwrap();
            assert_eq!(h.loss_net, l, "iteration {i}");
            adam.step(&mut delta, &g, cfg.imp_robust.phase1.lr);
        }
    }

    #[test]
    fn imp_robust_alpha_doubles_on_success() {
        let m = Mock::new();
        let x = clean();
        let y = target(&m, "four");
        let cfg = quick_cfg();
        let rooms = Rooms::identity(16_000);
        let init = robust_attack(&x, &y, &m, &rooms, &cfg).unwrap();
        let r = imperceptible_robust_attack(&x, &y, &m, &rooms, &init, &cfg).unwrap();
        if r.history[9].success == Some(true) && r.history[19].success == Some(true) {
            assert!((r.history[20].alpha - 0.04).abs() < 1e-15);
        }
        assert!(r.history.iter().all(|h| h.alpha > 0.0));
        assert!(r.history.iter().filter_map(|h| h.success).count() == 10);
    }

    #[test]
    fn imp_robust_needs_a_successful_start() {
        let m = Mock::new();
        let x = clean();
        let y = target(&m, "four");
        let mut failed = robust_attack(&x, &y, &m, &Rooms::identity(16_000), &quick_cfg()).unwrap();
        failed.success = false;
        let e = imperceptible_robust_attack(&x, &y, &m, &Rooms::identity(16_000), &failed, &quick_cfg());
        assert!(matches!(e, Err(Error::Precondition(_))));
    }

    #[test]
    fn attacks_are_deterministic() {
        let m = Mock::new();
        let x = clean();
        let y = target(&m, "five six");
        let d = RoomDistribution { max_order: 2, ..RoomDistribution::default() };
        let rooms = Rooms::sample(&d, 4, 3, 7, 16_000).unwrap();
        let cfg = quick_cfg();
        let a = robust_attack(&x, &y, &m, &rooms, &cfg).unwrap();
        let b = robust_attack(&x, &y, &m, &rooms, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.delta, b.delta);
    }

    #[test]
    fn check_set_rule_needs_every_room() {
        // One room always fails: a single transcription mismatch in the
        // check set makes the whole check fail.
        let m = Mock::new();
        let x = clean();
        let y = target(&m, "four");
        let good = Rir::identity(16_000);
        let silent = Rir::new(vec![1e-9], 16_000).unwrap();
        let rooms = Rooms { training: vec![good.clone(); 9].into_iter().chain([silent]).collect(), validation: vec![good] };
        let prepared = rooms.prepare(x.len(), 16_000).unwrap();
        let delta = vec![500.0; x.len()];
        let xd = add(x.samples(), &delta);
        assert_eq!(count_fooled(&m, &prepared.training, &xd, &y).unwrap(), 9);
        let all: Vec<&Reverb> = prepared.training.iter().collect();
        assert!(!all_fooled(&m, &all, &xd, &y).unwrap());
        assert!(all_fooled(&m, &all[..9], &xd, &y).unwrap());
    }

    #[test]
    fn evaluation_of_zero_perturbation() {
        let m = Mock::new();
        let x = clean();
        let y = target(&m, "four");
        let d = RoomDistribution { max_order: 1, ..RoomDistribution::default() };
        let zero = x.with_samples(vec![0.0; x.len()]).unwrap();
        let a = evaluate_attack(&x, &zero, &y, &m, &d, 3, 11).unwrap();
        assert!(!a.clean_success);
        assert_eq!(a.loss_theta, 0.0);
        assert_eq!(a, evaluate_attack(&x, &zero, &y, &m, &d, 3, 11).unwrap());
    }
}
