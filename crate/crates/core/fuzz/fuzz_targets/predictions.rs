#![no_main]

use libfuzzer_sys::fuzz_target;
use medharness::evalrunner::parse_predictions;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(preds) = parse_predictions(text) {
        for p in &preds {
            let line = serde_json::to_string(p).unwrap();
            assert_eq!(&parse_predictions(&line).unwrap()[0], p);
        }
    }
});
