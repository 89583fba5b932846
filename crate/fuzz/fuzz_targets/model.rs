#![no_main]

use libfuzzer_sys::fuzz_target;
use psychomask::recognizer::{ToyModelParams, Vocab};

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = ToyModelParams::from_bytes(data, Vocab::toy()) {
        assert_eq!(p.to_bytes(), data);
    }
});
