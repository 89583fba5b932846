use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use psychomask::audio::{clip_to_pcm, load_wav, save_wav};
use psychomask::config::{parse_room, ExperimentConfig};
use psychomask::error::{Error, Result};
use psychomask::eval::{dump_threshold, fmt_g, history_csv, parse_manifest, run_experiment, run_mode, sibling, Mode};
use psychomask::recognizer::{
    train_toy_recognizer, FeatureConfig, Recognizer, ToyCorpus, ToyModelParams, ToyRecognizer, Transcription,
};
use psychomask::room::image_source_rir;

#[derive(Parser)]
#[command(name = "psychomask", version, about = "Masked and room-robust adversarial audio against a toy recognizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Craft a perturbation for one clip.
    Attack {
        /// imperceptible, robust or imp-robust
        mode: Mode,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where the perturbation goes; `<stem>.adv.wav` and `<stem>.csv` are written beside it.
        #[arg(long)]
        out: PathBuf,
        /// Trained model file; a toy model is trained on the fly when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Overrides `robust.delta`.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Attack every item of a manifest and write per-item and summary CSVs.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "imperceptible")]
        mode: Mode,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "eval-out")]
        out: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Dump the masking threshold (and normalised PSD) of a WAV file.
    Threshold { input: PathBuf, out: PathBuf },
    /// Render the impulse response of one room. The WAV peaks at half of
    /// full scale; the factor goes to `<stem>.scale.txt` and the raw taps to
    /// `<stem>.csv`.
    Rir {
        #[arg(long)]
        room: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy recognizer on a synthetic corpus.
    TrainToy {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one synthetic utterance and print its transcription.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    path.map_or_else(|| Ok(ExperimentConfig::default()), ExperimentConfig::load)
}

fn load_model(path: Option<&Path>) -> Result<ToyRecognizer> {
    match path {
        Some(p) => ToyRecognizer::new(ToyModelParams::load(p)?, FeatureConfig::default()),
        None => {
            eprintln!("no --model given; training the toy recognizer with seed 0");
            train_toy_recognizer(0)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Attack { mode, input, target, config, seed, out, model, delta } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.attack.seed = seed;
            if let Some(d) = delta {
                cfg.attack.robust.delta = d;
                cfg.validate()?;
            }
            let model = load_model(model.as_deref())?;
            let x = load_wav(&input)?;
            let y = Transcription::parse(&target, model.vocab())?;
            let runs = run_mode(mode, &x, &y, &model, &cfg, None)?;
            let last = runs.last();
            let delta = last.delta.samples();
            save_wav(&last.delta.with_samples(clip_to_pcm(delta))?, &out)?;
            let adv: Vec<f64> = x.samples().iter().zip(delta).map(|(a, b)| a + b).collect();
            save_wav(&x.with_samples(clip_to_pcm(&adv))?, sibling(&out, ".adv.wav"))?;
            std::fs::write(sibling(&out, ".csv"), history_csv(&runs.history()))?;
            let heard = model.transcribe(&adv)?;
            println!("mode: {}", mode.name());
            println!("success: {}", last.success);
            println!("transcription: {}", heard.text);
            println!("max_abs: {}", fmt_g(last.delta.max_abs()));
            println!("loss_theta: {}", fmt_g(last.imperceptibility_loss_final));
            if let Some(t) = last.rooms {
                println!("validation_rooms: {}/{}", t.fooled, t.total);
            }
            Ok(last.success)
        }
        Command::Eval { manifest, mode, config, seed, out, model } => {
            let cfg = load_config(config.as_deref())?;
            let text = std::fs::read_to_string(&manifest)?;
            let items = parse_manifest(&text, manifest.parent().unwrap_or(Path::new(".")))?;
            let model = load_model(model.as_deref())?;
            let report = run_experiment(&items, mode, &model, &cfg, seed, &out)?;
            print!("{}", report.summary_csv());
            Ok(true)
        }
        Command::Threshold { input, out } => {
            dump_threshold(&input, &out)?;
            Ok(true)
        }
        Command::Rir { room, out } => {
            let (room, fs) = parse_room(&std::fs::read_to_string(&room)?)?;
            let rir = image_source_rir(&room, fs)?;
            let peak = rir.taps().iter().fold(0.0f64, |m, t| m.max(t.abs()));
            let scale = 16384.0 / peak;
            let scaled: Vec<f64> = rir.taps().iter().map(|t| t * scale).collect();
            save_wav(&psychomask::audio::Waveform::new(scaled, fs)?, &out)?;
            let mut csv = String::from("tap\n");
            for t in rir.taps() {
                csv.push_str(&fmt_g(*t));
                csv.push('\n');
            }
            std::fs::write(sibling(&out, ".csv"), csv)?;
            std::fs::write(sibling(&out, ".scale.txt"), format!("{}\n", fmt_g(scale)))?;
            println!("taps: {}", rir.len());
            println!("wav_scale: {}", fmt_g(scale));
            Ok(true)
        }
        Command::TrainToy { seed, out } => {
            let model = train_toy_recognizer(seed)?;
            model.params().save(&out)?;
            Ok(true)
        }
        Command::Synth { seed, out } => {
            let item = ToyCorpus::toy().item_from_seed(seed)?;
            save_wav(&item.waveform.with_samples(clip_to_pcm(item.waveform.samples()))?, &out)?;
            println!("{}", item.transcription.text);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Training(_) => 3,
                _ => 2,
            })
        }
    }
}
