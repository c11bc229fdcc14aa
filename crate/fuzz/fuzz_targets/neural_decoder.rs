#![no_main]

use libfuzzer_sys::fuzz_target;
use semeq::neural::decode_neural;

fuzz_target!(|data: &[u8]| {
    let _ = decode_neural(data);
});
