#![no_main]

use libfuzzer_sys::fuzz_target;
use medharness::slidegrid::parse_slide_manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_slide_manifest(text) {
        assert!(!m.levels.is_empty());
        for l in &m.levels {
            assert!(l.magnification > 0.0);
            assert!(!l.file.contains(".."));
        }
    }
});
