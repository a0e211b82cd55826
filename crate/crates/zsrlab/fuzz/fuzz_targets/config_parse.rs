#![no_main]

use libfuzzer_sys::fuzz_target;
use zsrlab::attacks::AttackConfig;
use zsrlab::data::{parse_config, SynthSpec};
use zsrlab::training::TrainConfig;

fuzz_target!(|data: &[u8]| {
    // all config schemas must reject or accept without panicking, and
    // anything accepted must pass its own validation errors cleanly
    if let Ok(cfg) = parse_config::<TrainConfig>(data) {
        let _ = cfg.validate();
    }
    if let Ok(cfg) = parse_config::<AttackConfig>(data) {
        let _ = cfg.validate();
    }
    if let Ok(spec) = parse_config::<SynthSpec>(data) {
        let _ = spec.validate();
    }
});
