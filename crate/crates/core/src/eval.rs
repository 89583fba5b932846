//! Metrics, CSV output and the batch driver.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::attack::{
    evaluate_attack, imperceptible_robust_attack, robust_attack, stage1_attack, stage2_imperceptible, AttackResult,
    IterationRecord, Rooms,
};
use crate::audio::{load_wav, Waveform};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::psycho::{masking_threshold, normalized_psd_frames};
use crate::recognizer::{Recognizer, ToyCorpus, Transcription};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_words: usize,
    /// Percent.
    pub wer: f64,
}

/// Lowercased, whitespace-split words.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Word error rate from a minimum edit-distance alignment. Among equally
/// cheap alignments the backtrace prefers substitution, then deletion,
/// then insertion.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<WerBreakdown> {
    let n = reference.len();
    let m = hypothesis.len();
    if n == 0 {
        return Err(Error::UndefinedWer);
    }
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            d[i][j] = (d[i - 1][j - 1] + usize::from(!same)).min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let (mut s, mut del, mut ins) = (0, 0, 0);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
                s += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            del += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    Ok(WerBreakdown {
        substitutions: s,
        deletions: del,
        insertions: ins,
        reference_words: n,
        wer: (s + del + ins) as f64 / n as f64 * 100.0,
    })
}

pub fn wer_text(reference: &str, hypothesis: &str) -> Result<WerBreakdown> {
    wer(&normalize_words(reference), &normalize_words(hypothesis))
}

/// Percentage of `true` flags.
pub fn sentence_accuracy(flags: &[bool]) -> Result<f64> {
    if flags.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64 * 100.0)
}

// ---------------------------------------------------------------------------
// CSV

/// `%g`-style rendering with six significant digits.
pub fn fmt_g(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mantissa}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt_bool(b: Option<bool>) -> &'static str {
    match b {
        Some(true) => "1",
        Some(false) => "0",
        None => "",
    }
}

/// One line per iteration: `iter,loss_net,loss_theta,eps,alpha,success`.
pub fn history_csv(history: &[IterationRecord]) -> String {
    let mut out = String::from("iter,loss_net,loss_theta,eps,alpha,success\n");
    for h in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            h.iter,
            fmt_g(h.loss_net),
            h.loss_theta.map(fmt_g).unwrap_or_default(),
            fmt_g(h.epsilon),
            fmt_g(h.alpha),
            opt_bool(h.success)
        );
    }
    out
}

/// Frames as rows, bins as columns, with a `k0,k1,...` header.
pub fn matrix_csv(rows: &[Vec<f64>]) -> String {
    let width = rows.first().map_or(0, Vec::len);
    let mut out = (0..width).map(|k| format!("k{k}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.iter().map(|&v| fmt_g(v)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

/// Path next to `out` with `suffix` replacing its extension.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

/// Writes the masking threshold of `input` (dB, one row per frame) to
/// `out` and the normalised PSD of the same frames to `<stem>.psd.csv`.
pub fn dump_threshold(input: &Path, out: &Path) -> Result<()> {
    let x = load_wav(input)?;
    let c = crate::audio::StftConfig::psychoacoustic();
    let th = masking_threshold(&x, &c)?;
    let psd = normalized_psd_frames(&x, &c)?;
    fs::write(out, matrix_csv(&th.theta_db))?;
    fs::write(sibling(out, ".psd.csv"), matrix_csv(&psd.iter().map(|p| p.values.clone()).collect::<Vec<_>>()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest and batch runs

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ItemSource {
    Path(PathBuf),
    /// Seed for the toy utterance generator.
    Seed(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestItem {
    pub source: ItemSource,
    pub target: String,
}

/// One item per line: source, a tab, the target tokens. A source made only
/// of digits is a generator seed; anything else is a WAV path, resolved
/// against `base`. Blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestItem>> {
    let mut items = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (src, target) = line
            .split_once('\t')
            .ok_or_else(|| Error::Config(format!("manifest line {}: expected source<TAB>target", i + 1)))?;
        let src = src.trim();
        let target = target.trim();
        if src.is_empty() || target.is_empty() {
            return Err(Error::Config(format!("manifest line {}: empty field", i + 1)));
        }
        let source = if src.bytes().all(|b| b.is_ascii_digit()) {
            ItemSource::Seed(src.parse().map_err(|_| Error::Config(format!("manifest line {}: seed too large", i + 1)))?)
        } else {
            ItemSource::Path(base.join(src))
        };
        items.push(ManifestItem { source, target: target.to_string() });
    }
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Imperceptible,
    Robust,
    ImpRobust,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Imperceptible => "imperceptible",
            Mode::Robust => "robust",
            Mode::ImpRobust => "imp-robust",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "imperceptible" => Ok(Mode::Imperceptible),
            "robust" => Ok(Mode::Robust),
            "imp-robust" => Ok(Mode::ImpRobust),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

/// Every stage a mode runs, in order. The last one is the mode's answer.
#[derive(Debug, Clone)]
pub struct ModeRun {
    pub stages: Vec<AttackResult>,
}

impl ModeRun {
    pub fn last(&self) -> &AttackResult {
        self.stages.last().expect("at least one stage")
    }

    pub fn history(&self) -> Vec<IterationRecord> {
        let mut out = Vec::new();
        let mut offset = 0;
        for s in &self.stages {
            out.extend(s.history.iter().map(|h| IterationRecord { iter: h.iter + offset, ..h.clone() }));
            offset = out.last().map_or(offset, |h| h.iter);
        }
        out
    }
}

/// Runs `mode` end to end. Later stages are skipped when an earlier one
/// fails.
pub fn run_mode(
    mode: Mode,
    x: &Waveform,
    y: &Transcription,
    model: &dyn Recognizer,
    cfg: &ExperimentConfig,
    rooms: Option<&Rooms>,
) -> Result<ModeRun> {
    let a = &cfg.attack;
    let owned;
    let rooms = match (mode, rooms) {
        (Mode::Imperceptible, _) => None,
        (_, Some(r)) => Some(r),
        (_, None) => {
            owned = Rooms::sample(&cfg.rooms, cfg.training_rooms, cfg.validation_rooms, a.seed, x.sample_rate())?;
            Some(&owned)
        }
    };
    let mut stages = Vec::new();
    match mode {
        Mode::Imperceptible => {
            let s1 = stage1_attack(x, y, model, a)?;
            let ok = s1.success;
            let init = s1.delta.clone();
            stages.push(s1);
            if ok {
                stages.push(stage2_imperceptible(x, y, model, &init, a)?);
            }
        }
        Mode::Robust => stages.push(robust_attack(x, y, model, rooms.expect("rooms drawn"), a)?),
        Mode::ImpRobust => {
            let rooms = rooms.expect("rooms drawn");
            let r = robust_attack(x, y, model, rooms, a)?;
            let ok = r.success;
            stages.push(r);
            if ok {
                let next = imperceptible_robust_attack(x, y, model, rooms, &stages[0], a)?;
                stages.push(next);
            }
        }
    }
    Ok(ModeRun { stages })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemRecord {
    pub index: usize,
    pub source: String,
    pub target: String,
    pub transcription: String,
    pub success: bool,
    pub wer: f64,
    pub max_abs: f64,
    pub loss_theta: f64,
    pub rooms_fooled: usize,
    pub rooms_total: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub items: Vec<ItemRecord>,
    /// Clean-path sentence accuracy against the targets, percent.
    pub accuracy: f64,
    /// Mean fraction of test rooms fooled, percent.
    pub room_success: f64,
    pub mean_wer: f64,
}

impl BatchReport {
    pub fn items_csv(&self) -> String {
        let mut out =
            String::from("index,source,target,transcription,success,wer,max_abs,loss_theta,rooms_fooled,rooms_total,error\n");
        for r in &self.items {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.index,
                csv_field(&r.source),
                csv_field(&r.target),
                csv_field(&r.transcription),
                u8::from(r.success),
                fmt_g(r.wer),
                fmt_g(r.max_abs),
                fmt_g(r.loss_theta),
                r.rooms_fooled,
                r.rooms_total,
                csv_field(&r.error)
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "items,accuracy,mean_wer,room_success\n{},{},{},{}\n",
            self.items.len(),
            fmt_g(self.accuracy),
            fmt_g(self.mean_wer),
            fmt_g(self.room_success)
        )
    }
}

fn load_item(item: &ManifestItem, corpus: &ToyCorpus) -> Result<Waveform> {
    match &item.source {
        ItemSource::Path(p) => load_wav(p),
        ItemSource::Seed(s) => Ok(corpus.item_from_seed(*s)?.waveform),
    }
}

fn run_item(
    item: &ManifestItem,
    mode: Mode,
    model: &dyn Recognizer,
    cfg: &ExperimentConfig,
    rooms: Option<&Rooms>,
    corpus: &ToyCorpus,
) -> Result<(Transcription, Waveform, Waveform)> {
    let x = load_item(item, corpus)?;
    let y = Transcription::parse(&item.target, model.vocab())?;
    let run = run_mode(mode, &x, &y, model, cfg, rooms)?;
    Ok((y, x, run.last().delta.clone()))
}

/// Attacks every manifest item, evaluates the result on the clean path and
/// on `cfg.test_rooms` held-out rooms, and writes `items.csv` and
/// `summary.csv` into `out_dir`. Item failures are recorded, not raised.
pub fn run_experiment(
    items: &[ManifestItem],
    mode: Mode,
    model: &dyn Recognizer,
    cfg: &ExperimentConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<BatchReport> {
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut cfg = cfg.clone();
    cfg.attack.seed = seed;
    let corpus = ToyCorpus::toy();
    let mut rooms_cache: Option<Rooms> = None;
    let mut records = Vec::with_capacity(items.len());
    for (index, item) in items.iter().enumerate() {
        let source = match &item.source {
            ItemSource::Path(p) => p.display().to_string(),
            ItemSource::Seed(s) => s.to_string(),
        };
        let mut rec = ItemRecord {
            index,
            source,
            target: item.target.clone(),
            transcription: String::new(),
            success: false,
            wer: 100.0,
            max_abs: 0.0,
            loss_theta: 0.0,
            rooms_fooled: 0,
            rooms_total: 0,
            error: String::new(),
        };
        let outcome = (|| -> Result<()> {
            let fs = model.sample_rate();
            if mode != Mode::Imperceptible && rooms_cache.is_none() {
                rooms_cache = Some(Rooms::sample(&cfg.rooms, cfg.training_rooms, cfg.validation_rooms, seed, fs)?);
            }
            let (y, x, delta) = run_item(item, mode, model, &cfg, rooms_cache.as_ref(), &corpus)?;
            let ev = evaluate_attack(&x, &delta, &y, model, &cfg.rooms, cfg.test_rooms, seed)?;
            let xd: Vec<f64> = x.samples().iter().zip(delta.samples()).map(|(a, b)| a + b).collect();
            let hyp = model.transcribe(&xd)?;
            rec.transcription = hyp.text.clone();
            rec.success = ev.clean_success;
            rec.wer = wer_text(&y.text, &hyp.text)?.wer;
            rec.max_abs = ev.max_abs;
            rec.loss_theta = ev.loss_theta;
            rec.rooms_fooled = ev.rooms_fooled;
            rec.rooms_total = ev.rooms_total;
            Ok(())
        })();
        if let Err(e) = outcome {
            rec.error = e.to_string();
        }
        records.push(rec);
    }
    let flags: Vec<bool> = records.iter().map(|r| r.success).collect();
    let room_rates: Vec<f64> = records
        .iter()
        .map(|r| if r.rooms_total == 0 { 0.0 } else { r.rooms_fooled as f64 / r.rooms_total as f64 })
        .collect();
    let report = BatchReport {
        accuracy: sentence_accuracy(&flags)?,
        room_success: room_rates.iter().sum::<f64>() / room_rates.len() as f64 * 100.0,
        mean_wer: records.iter().map(|r| r.wer).sum::<f64>() / records.len() as f64,
        items: records,
    };
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("items.csv"), report.items_csv())?;
    fs::write(out_dir.join("summary.csv"), report.summary_csv())?;
    Ok(report)
}
