//! Dataset CSV ingestion must reject malformed input with errors, never
//! panics, for both label-column addressing modes.

#![no_main]
use libfuzzer_sys::fuzz_target;

use calib::data::{parse_csv, LabelColumn};
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let path = Path::new("fuzz.csv");
        let _ = parse_csv(text, &LabelColumn::Name("label".into()), path);
        let _ = parse_csv(text, &LabelColumn::Index(0), path);
        let _ = parse_csv(text, &LabelColumn::Index(2), path);
    }
});
