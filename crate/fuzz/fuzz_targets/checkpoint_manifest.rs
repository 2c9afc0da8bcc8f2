#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entries) = sgp_core::checkpoint::parse_manifest(text) {
        for (name, file, dims) in &entries {
            assert!(!name.is_empty());
            assert!(!file.contains(".."));
            assert!(!dims.is_empty());
        }
    }
});
