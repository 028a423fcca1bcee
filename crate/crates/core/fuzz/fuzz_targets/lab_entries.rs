#![no_main]

use libfuzzer_sys::fuzz_target;
use medharness::medmetrics::{match_lab_entries, score_extraction, MatcherConfig};
use medharness::promptforge::parse_lab_entries;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(parsed) = parse_lab_entries(text) else { return };
    assert!(parsed.items.iter().all(|e| !e.name.is_empty()));
    // every entry pairs with itself
    let cfg = MatcherConfig::default();
    let m = match_lab_entries(&parsed.items, &parsed.items, &cfg);
    assert_eq!(m.pairs.len(), parsed.items.len());
    let s = score_extraction(&m, &parsed.items, &parsed.items, &cfg);
    assert!((0.0..=1.0).contains(&s.overall.f1));
});
