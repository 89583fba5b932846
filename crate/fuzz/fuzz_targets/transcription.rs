#![no_main]

use libfuzzer_sys::fuzz_target;
use psychomask::recognizer::{Transcription, Vocab};

fuzz_target!(|data: &[u8]| {
    let vocab = Vocab::toy();
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(t) = Transcription::parse(text, &vocab) {
            assert_eq!(Transcription::parse(&t.text, &vocab).unwrap().tokens, t.tokens);
        }
    }
});
