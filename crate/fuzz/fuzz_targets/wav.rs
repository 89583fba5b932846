#![no_main]

use libfuzzer_sys::fuzz_target;
use psychomask::audio::parse_wav;

fuzz_target!(|data: &[u8]| {
    if let Ok(w) = parse_wav(data) {
        assert!(w.samples().iter().all(|s| s.is_finite()));
    }
});
