//! Calibration map JSON: parse, validate, and apply without panicking.

#![no_main]
use libfuzzer_sys::fuzz_target;

use calib::posthoc::CalibrationMap;
use calib::tensor::Tensor;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(map) = CalibrationMap::from_json(text) {
            let probes = [0.0, 0.25, 0.5, 0.75, 1.0, -3.0, 7.0];
            let _ = map.apply_scores(&probes);
            let logits = Tensor::from_rows(&[vec![1.5, -0.5], vec![0.0, 0.0]]);
            let _ = map.apply_logits(&logits);
        }
    }
});
