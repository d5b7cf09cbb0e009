#![no_main]

use libfuzzer_sys::fuzz_target;
use voxflow::batching::PipelineBundle;
use voxflow::model::ModelRegistry;

fuzz_target!(|data: &[u8]| {
    let _ = PipelineBundle::from_bytes(data, &ModelRegistry::with_builtins());
});
