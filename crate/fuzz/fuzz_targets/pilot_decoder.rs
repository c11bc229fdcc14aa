#![no_main]

use libfuzzer_sys::fuzz_target;
use semeq::pilots::{decode_pilot_matrix, encode_pilot_matrix};

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = decode_pilot_matrix(data) {
        // anything accepted must re-encode to the same bytes
        assert_eq!(encode_pilot_matrix(&m), data);
    }
});
