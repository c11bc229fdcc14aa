#![no_main]

use libfuzzer_sys::fuzz_target;
use semeq::harness::{parse_config, ConfigFormat};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        for format in [ConfigFormat::Toml, ConfigFormat::Json] {
            if let Ok(cfg) = parse_config(text, format) {
                let _ = cfg.validate();
            }
        }
    }
});
