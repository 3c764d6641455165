#![no_main]

use asgat::config::KeyValues;
use asgat::train::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(kv) = KeyValues::parse(text) {
        let _ = TrainConfig::default().apply(&kv);
    }
});
