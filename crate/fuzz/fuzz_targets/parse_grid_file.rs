#![no_main]

use libfuzzer_sys::fuzz_target;
use pglmm::io::{parse_grid, parse_grid_file, parse_grid_settings};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = parse_grid_file(text, "fuzz");
    let _ = parse_grid(text, "fuzz");
    let _ = parse_grid_settings(text, "fuzz");
});
