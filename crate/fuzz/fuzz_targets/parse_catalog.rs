#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use voxflow::catalog::parse_catalog;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_catalog(text, Path::new("/nonexistent"));
    }
});
