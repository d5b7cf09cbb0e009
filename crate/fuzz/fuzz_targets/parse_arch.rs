#![no_main]

use libfuzzer_sys::fuzz_target;
use voxflow::netshape::ArchConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ArchConfig::from_toml(text) {
        let _ = cfg.receptive_field();
        let _ = cfg.output_size([64, 64, 64]);
    }
});
