#![no_main]

use libfuzzer_sys::fuzz_target;

// The binary tensor reader must be total over arbitrary bytes: reject
// without panicking or over-allocating, and round-trip what it accepts.
fuzz_target!(|data: &[u8]| {
    if let Ok((dims, values)) = sgp_core::sgt::parse(data) {
        let reencoded = sgp_core::sgt::encode(&dims, &values);
        let (d2, v2) = sgp_core::sgt::parse(&reencoded).expect("reencode must parse");
        assert_eq!(dims, d2);
        assert_eq!(
            values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            v2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
});
