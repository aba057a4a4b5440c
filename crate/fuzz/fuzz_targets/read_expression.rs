#![no_main]

use libfuzzer_sys::fuzz_target;
use pglmm::io::{read_expression, read_labels};

fuzz_target!(|data: &[u8]| {
    // A zero byte separates an optional labels file from the expression file.
    match data.iter().position(|b| *b == 0) {
        Some(cut) => {
            if let Ok(labels) = read_labels(&data[..cut], "labels") {
                let _ = read_expression(&data[cut + 1..], "expr", "s1", Some(&labels));
            }
        }
        None => {
            let _ = read_expression(data, "expr", "s1", None);
        }
    }
});
