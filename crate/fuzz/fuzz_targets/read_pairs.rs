#![no_main]

use libfuzzer_sys::fuzz_target;
use pglmm::io::read_pairs;

fuzz_target!(|data: &[u8]| {
    let _ = read_pairs(data, "fuzz");
});
