#![no_main]

use libfuzzer_sys::fuzz_target;
use osmcaa::config::RunConfig;

fuzz_target!(|bytes: &[u8]| {
    let Ok(text) = std::str::from_utf8(bytes) else {
        return;
    };
    if let Ok(cfg) = RunConfig::parse(text) {
        if cfg.validate().is_ok() {
            let again = RunConfig::parse(&cfg.to_text()).expect("echoed configs parse");
            assert_eq!(again, cfg);
        }
    }
});
