use std::path::Path;

use psychomask::audio::{load_wav, save_wav};
use psychomask::config::ExperimentConfig;
use psychomask::eval::{run_experiment, ItemSource, ManifestItem, Mode};
use psychomask::recognizer::{
    train_toy_recognizer, FeatureConfig, Recognizer, ToyCorpus, ToyModelParams, ToyRecognizer, Transcription,
};

fn quick() -> ExperimentConfig {
    ExperimentConfig::parse(
        "stage1.iterations = 300\nstage2.iterations = 400\nstage2.alpha = 5e-7\n\
         rooms.training = 4\nrooms.validation = 4\nrooms.test = 4\n",
    )
    .unwrap()
}

#[test]
fn trained_model_survives_a_save_and_reload() {
    let model = train_toy_recognizer(2).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.bin");
    model.params().save(&path).unwrap();
    let back = ToyRecognizer::new(ToyModelParams::load(&path).unwrap(), FeatureConfig::default()).unwrap();
    assert_eq!(back.params(), model.params());

    let corpus = ToyCorpus::toy();
    let items = corpus.generate(900, 10).unwrap();
    let mut right = 0;
    for item in &items {
        let a = model.transcribe(item.waveform.samples()).unwrap();
        assert_eq!(a, back.transcribe(item.waveform.samples()).unwrap());
        right += usize::from(a == item.transcription);
    }
    assert!(right >= 9, "held-out sentence accuracy {right}/10");

    // Audio written to disk and read back is still recognised.
    let wav = tmp.path().join("u.wav");
    save_wav(&items[0].waveform.with_samples(psychomask::audio::clip_to_pcm(items[0].waveform.samples())).unwrap(), &wav)
        .unwrap();
    let x = load_wav(&wav).unwrap();
    assert_eq!(back.transcribe(x.samples()).unwrap(), items[0].transcription);
}

#[test]
fn batch_run_writes_reports_and_keeps_going_after_bad_items() {
    let model = train_toy_recognizer(3).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let items = vec![
        ManifestItem { source: ItemSource::Seed(41), target: "six two".into() },
        ManifestItem { source: ItemSource::Path(tmp.path().join("absent.wav")), target: "one".into() },
        ManifestItem { source: ItemSource::Seed(42), target: "eleven".into() },
    ];
    let out = tmp.path().join("out");
    let report = run_experiment(&items, Mode::Imperceptible, &model, &quick(), 1, &out).unwrap();
    assert_eq!(report.items.len(), 3);
    assert!(report.items[0].error.is_empty(), "{}", report.items[0].error);
    assert!(report.items[0].success);
    assert_eq!(report.items[0].wer, 0.0);
    assert!(!report.items[1].error.is_empty());
    assert!(!report.items[2].error.is_empty());
    let items_csv = std::fs::read_to_string(out.join("items.csv")).unwrap();
    assert_eq!(items_csv.lines().count(), 4);
    assert!(Path::new(&out.join("summary.csv")).exists());
    assert_eq!(Transcription::parse("six two", model.vocab()).unwrap().text, report.items[0].transcription);
}
