//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are skipped. Keys are dotted
//! paths such as `stage1.lr`; ranges are two whitespace-separated numbers.
//! Unknown and repeated keys are errors.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::attack::{AttackConfig, PhaseConfig};
use crate::error::{Error, Result};
use crate::room::{RoomConfig, RoomDistribution, DEFAULT_SPEED_OF_SOUND};

/// Everything an experiment run reads from its config file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub attack: AttackConfig,
    pub rooms: RoomDistribution,
    pub training_rooms: usize,
    pub validation_rooms: usize,
    pub test_rooms: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            attack: AttackConfig::default(),
            rooms: RoomDistribution::default(),
            training_rooms: 64,
            validation_rooms: 20,
            test_rooms: 20,
        }
    }
}

/// Raw entries in file order with their line numbers.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`")))?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || key.chars().any(char::is_whitespace) {
            return Err(Error::Config(format!("line {line_no}: bad key {key:?}")));
        }
        if value.is_empty() {
            return Err(Error::Config(format!("line {line_no}: {key} has no value")));
        }
        if let Some(prev) = seen.insert(key.to_string(), line_no) {
            return Err(Error::Config(format!("line {line_no}: {key} already set on line {prev}")));
        }
        out.push((key.to_string(), value.to_string(), line_no));
    }
    Ok(out)
}

fn scalar<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("line {line}: cannot parse {key} = {value:?}")))
}

fn numbers<const K: usize>(key: &str, value: &str, line: usize) -> Result<[f64; K]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != K {
        return Err(Error::Config(format!("line {line}: {key} needs {K} numbers, got {}", parts.len())));
    }
    let mut out = [0.0; K];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = scalar(key, p, line)?;
    }
    Ok(out)
}

fn range(key: &str, value: &str, line: usize) -> Result<(f64, f64)> {
    let [lo, hi] = numbers::<2>(key, value, line)?;
    Ok((lo, hi))
}

fn phase_key(p: &mut PhaseConfig, field: &str, key: &str, v: &str, line: usize) -> Result<bool> {
    match field {
        "alpha" => p.alpha_init = scalar(key, v, line)?,
        "lr" => p.lr = scalar(key, v, line)?,
        "iterations" => p.iterations = scalar(key, v, line)?,
        "required" => p.required = scalar(key, v, line)?,
        "alpha_up" => p.alpha_up = scalar(key, v, line)?,
        "alpha_down" => p.alpha_down = scalar(key, v, line)?,
        "alpha_down_every" => p.alpha_down_every = scalar(key, v, line)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (key, v, line) in parse_entries(text)? {
            let (k, v) = (key.as_str(), v.as_str());
            let a = &mut c.attack;
            match k {
                "seed" => a.seed = scalar(k, v, line)?,
                "stage1.lr" => a.stage1.lr = scalar(k, v, line)?,
                "stage1.iterations" => a.stage1.iterations = scalar(k, v, line)?,
                "stage1.epsilon" => a.stage1.epsilon_init = scalar(k, v, line)?,
                "stage1.epsilon_decay" => a.stage1.epsilon_decay = scalar(k, v, line)?,
                "stage1.check_every" => a.stage1.check_every = scalar(k, v, line)?,
                "stage2.lr" => a.stage2.lr = scalar(k, v, line)?,
                "stage2.lr_late" => a.stage2.lr_late = scalar(k, v, line)?,
                "stage2.lr_drop_after" => a.stage2.lr_drop_after = scalar(k, v, line)?,
                "stage2.iterations" => a.stage2.iterations = scalar(k, v, line)?,
                "stage2.alpha" => a.stage2.alpha_init = scalar(k, v, line)?,
                "stage2.alpha_up" => a.stage2.alpha_up = scalar(k, v, line)?,
                "stage2.alpha_up_every" => a.stage2.alpha_up_every = scalar(k, v, line)?,
                "stage2.alpha_down" => a.stage2.alpha_down = scalar(k, v, line)?,
                "stage2.alpha_down_every" => a.stage2.alpha_down_every = scalar(k, v, line)?,
                "robust.lr1" => a.robust.lr1 = scalar(k, v, line)?,
                "robust.iterations1" => a.robust.iterations1 = scalar(k, v, line)?,
                "robust.lr2" => a.robust.lr2 = scalar(k, v, line)?,
                "robust.iterations2" => a.robust.iterations2 = scalar(k, v, line)?,
                "robust.delta" => a.robust.delta = scalar(k, v, line)?,
                "robust.rooms_per_check" => a.robust.rooms_per_check = scalar(k, v, line)?,
                "robust.check_every" => a.robust.check_every = scalar(k, v, line)?,
                "imp_robust.rooms_per_check" => a.imp_robust.rooms_per_check = scalar(k, v, line)?,
                "imp_robust.check_every" => a.imp_robust.check_every = scalar(k, v, line)?,
                "imp_robust.selection_floor" => a.imp_robust.selection_floor = scalar(k, v, line)?,
                "adam.beta1" => a.adam.beta1 = scalar(k, v, line)?,
                "adam.beta2" => a.adam.beta2 = scalar(k, v, line)?,
                "adam.epsilon" => a.adam.epsilon = scalar(k, v, line)?,
                "rooms.training" => c.training_rooms = scalar(k, v, line)?,
                "rooms.validation" => c.validation_rooms = scalar(k, v, line)?,
                "rooms.test" => c.test_rooms = scalar(k, v, line)?,
                "room.x" => c.rooms.dimensions[0] = range(k, v, line)?,
                "room.y" => c.rooms.dimensions[1] = range(k, v, line)?,
                "room.z" => c.rooms.dimensions[2] = range(k, v, line)?,
                "room.rt60" => c.rooms.rt60 = range(k, v, line)?,
                "room.wall_margin" => c.rooms.wall_margin = scalar(k, v, line)?,
                "room.max_order" => c.rooms.max_order = scalar(k, v, line)?,
                "room.speed_of_sound" => c.rooms.speed_of_sound = scalar(k, v, line)?,
                _ => {
                    let handled = match k.split_once('.') {
                        Some(("imp_robust", rest)) => match rest.split_once('.') {
                            Some(("phase1", f)) => phase_key(&mut a.imp_robust.phase1, f, k, v, line)?,
                            Some(("phase2", f)) => phase_key(&mut a.imp_robust.phase2, f, k, v, line)?,
                            _ => false,
                        },
                        _ => false,
                    };
                    if !handled {
                        return Err(Error::Config(format!("line {line}: unknown key {k:?}")));
                    }
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.attack.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.rooms.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.training_rooms == 0 || self.validation_rooms == 0 {
            return Err(Error::Config("room sets must not be empty".into()));
        }
        Ok(())
    }
}

/// Parses a single-room description for the `rir` command. Required keys:
/// `dimensions`, `source`, `mic` (three numbers each) and `rt60`; optional
/// `max_order` (default 10), `speed_of_sound` and `sample_rate` (16000).
pub fn parse_room(text: &str) -> Result<(RoomConfig, u32)> {
    let mut dimensions = None;
    let mut source = None;
    let mut mic = None;
    let mut rt60 = None;
    let mut max_order = 10;
    let mut speed_of_sound = DEFAULT_SPEED_OF_SOUND;
    let mut sample_rate = 16_000;
    for (key, v, line) in parse_entries(text)? {
        let k = key.as_str();
        match k {
            "dimensions" => dimensions = Some(numbers::<3>(k, &v, line)?),
            "source" => source = Some(numbers::<3>(k, &v, line)?),
            "mic" => mic = Some(numbers::<3>(k, &v, line)?),
            "rt60" => rt60 = Some(scalar(k, &v, line)?),
            "max_order" => max_order = scalar(k, &v, line)?,
            "speed_of_sound" => speed_of_sound = scalar(k, &v, line)?,
            "sample_rate" => sample_rate = scalar(k, &v, line)?,
            _ => return Err(Error::Config(format!("line {line}: unknown key {k:?}"))),
        }
    }
    let missing = |name: &str| Error::Config(format!("room file lacks {name}"));
    let room = RoomConfig {
        dimensions: dimensions.ok_or_else(|| missing("dimensions"))?,
        source: source.ok_or_else(|| missing("source"))?,
        mic: mic.ok_or_else(|| missing("mic"))?,
        rt60: rt60.ok_or_else(|| missing("rt60"))?,
        max_order,
        speed_of_sound,
    };
    room.validate().map_err(|e| Error::Config(e.to_string()))?;
    if sample_rate == 0 {
        return Err(Error::Config("sample_rate must be positive".into()));
    }
    Ok((room, sample_rate))
}
