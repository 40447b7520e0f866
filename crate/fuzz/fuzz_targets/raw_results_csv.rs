//! Persisted raw confidence arrays as read back by the audit pass.

#![no_main]
use libfuzzer_sys::fuzz_target;

use calib::harness::persist::parse_raw_csv;
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_raw_csv(text, Path::new("fuzz.csv"));
    }
});
