#![no_main]

use libfuzzer_sys::fuzz_target;
use medharness::medmetrics::iou;
use medharness::promptforge::parse_bboxes;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(parsed) = parse_bboxes(text) {
        for b in &parsed.items {
            assert!(b.is_valid(), "{b:?}");
            let v = iou(b, b);
            assert!((0.0..=1.0).contains(&v));
        }
    }
});
