//! The experiment config grammar: arbitrary text plus one override pair.

#![no_main]
use libfuzzer_sys::fuzz_target;

use calib::harness::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = ExperimentConfig::parse(text, &[]);
        // Half the input doubles as an override value.
        if let Some((_, value)) = text.split_once('\n') {
            let overrides = vec![("train.epochs".to_string(), value.to_string())];
            let _ = ExperimentConfig::parse(text, &overrides);
        }
    }
});
