#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use medharness::evalrunner::parse_manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_manifest(text, Path::new("/nonexistent"), false) {
        assert!(!m.records.is_empty());
    }
});
