#![no_main]

use libfuzzer_sys::fuzz_target;
use medharness::config::GlobalConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = GlobalConfig::from_toml(text) {
        let again = GlobalConfig::from_toml(&cfg.to_toml()).expect("own output parses");
        assert_eq!(again.digest(), cfg.digest());
    }
});
