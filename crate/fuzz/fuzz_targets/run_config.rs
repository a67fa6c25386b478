#![no_main]

use flowsr_core::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::from_toml(text) {
            let text = cfg.to_toml();
            let again = RunConfig::from_toml(&text).expect("effective config parses");
            assert_eq!(again.to_toml(), text);
        }
    }
});
