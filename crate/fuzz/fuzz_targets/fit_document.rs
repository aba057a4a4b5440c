#![no_main]

use libfuzzer_sys::fuzz_target;
use pglmm::io::FitDocument;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(doc) = FitDocument::from_json(text) {
        // Accepted documents must survive a round trip.
        let again = FitDocument::from_json(&doc.to_json().unwrap()).unwrap();
        assert_eq!(doc, again);
    }
});
