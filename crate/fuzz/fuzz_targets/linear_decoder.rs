#![no_main]

use libfuzzer_sys::fuzz_target;
use semeq::linear::decode_linear;

fuzz_target!(|data: &[u8]| {
    let _ = decode_linear(data);
});
