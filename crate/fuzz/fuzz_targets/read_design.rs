#![no_main]

use libfuzzer_sys::fuzz_target;
use pglmm::io::read_design;

fuzz_target!(|data: &[u8]| {
    let columns = ["intercept".to_string(), "x1".to_string(), "x2".to_string()];
    let _ = read_design(data, "fuzz", &columns);
});
