#![no_main]

use kip::config::{parse_config, Settings};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(map) = parse_config(text) {
        let mut s = Settings::default();
        if s.apply(&map).is_ok() {
            let _ = s.validate();
        }
    }
});
