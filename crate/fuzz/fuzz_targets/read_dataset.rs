#![no_main]

use libfuzzer_sys::fuzz_target;
use pglmm::io::{read_dataset, DatasetSpec};
use pglmm::model::Family;

fuzz_target!(|data: &[u8]| {
    let Some((&selector, body)) = data.split_first() else {
        return;
    };
    let family = if selector & 1 == 0 { Family::Bernoulli } else { Family::Gaussian };
    let mut spec = DatasetSpec::new("y", "study", family);
    if selector & 2 != 0 {
        spec.z_columns = Some(vec!["x1".into()]);
    }
    let _ = read_dataset(body, "fuzz", &spec);
});
