#![no_main]

use libfuzzer_sys::fuzz_target;
use sgp_core::config::Config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = Config::parse(text) {
        // anything accepted must survive its own canonical form
        let rendered = cfg.render();
        let again = Config::parse(&rendered).expect("canonical form must parse");
        assert_eq!(cfg.resolved_capacity(), again.resolved_capacity());
    }
});
