#![no_main]

use libfuzzer_sys::fuzz_target;
use voxflow::Creator;

fuzz_target!(|data: &[u8]| {
    if let Ok(creator) = Creator::from_bytes(data) {
        let _ = creator.summary();
    }
});
