#![no_main]

use libfuzzer_sys::fuzz_target;
use voxflow::nifti_io::decode_volume_with_limit;

fuzz_target!(|data: &[u8]| {
    // Keep header-declared sizes from exhausting memory.
    let _ = decode_volume_with_limit(data, 1 << 24);
});
