#![no_main]

use libfuzzer_sys::fuzz_target;
use pglmm::io::read_features;

fuzz_target!(|data: &[u8]| {
    let _ = read_features(data, "fuzz", "response", "study");
});
