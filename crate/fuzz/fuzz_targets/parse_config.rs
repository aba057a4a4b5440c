#![no_main]

use libfuzzer_sys::fuzz_target;
use pglmm::io::{parse_key_values, parse_simulation};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = parse_key_values(text, "fuzz");
    let _ = parse_simulation(text, "fuzz");
});
