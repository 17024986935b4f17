#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = fedbn_core::config::parse_config_str(text, Path::new("/fuzz")) {
        let _ = cfg.validate();
        let echoed = cfg.to_toml();
        fedbn_core::config::parse_config_str(&echoed, Path::new("/fuzz")).unwrap();
    }
});
