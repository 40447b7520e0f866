//! Model checkpoint JSON: shape, magic, and finiteness validation must be
//! total.

#![no_main]
use libfuzzer_sys::fuzz_target;

use calib::model::parse_checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_checkpoint(text);
    }
});
