#![no_main]

use libfuzzer_sys::fuzz_target;
use medharness::promptforge::{
    parse_choice, parse_diagnosis_choice, parse_final_answer, parse_temporal, parse_yes_no,
};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let answer = parse_final_answer(text);
    if let Ok(c) = parse_choice(text) {
        assert!(('A'..='E').contains(&c));
        assert!(answer.is_ok());
    }
    if parse_yes_no(text).is_ok() || parse_temporal(text).is_ok() {
        assert!(answer.is_ok());
    }
    if let Ok(c) = parse_diagnosis_choice(text) {
        assert!(('A'..='E').contains(&c));
    }
});
