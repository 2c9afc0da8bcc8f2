#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entries) = sgp_core::data::parse_manifest(text) {
        // accepted manifests are dense, ordered, and path-sane
        for (i, e) in entries.iter().enumerate() {
            assert_eq!(e.idx, i);
            assert!(!e.image.contains(".."));
            assert!(!e.mask.starts_with('/'));
        }
    }
    let _ = sgp_core::data::parse_meta(text);
});
