#![no_main]

use kbrw::io::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = ExperimentConfig::from_json(text) else { return };
    let back = ExperimentConfig::from_json(&cfg.to_json()).expect("serialized config parses");
    assert_eq!(back.config_hash(), cfg.config_hash());
});
