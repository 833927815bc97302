#![no_main]

use kbrw::model::ModelSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(model) = ModelSpec::from_json(text) else { return };
    let back = ModelSpec::from_json(&model.to_json()).expect("serialized model parses");
    assert_eq!(back.kind(), model.kind());
    // analysis may reject the model but must not panic
    let _ = model.analyze();
});
