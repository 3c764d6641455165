#![no_main]

use asgat::autodiff::Checkpoint;
use asgat::model::Model;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(ck) = Checkpoint::parse(text) {
        let _ = Model::from_checkpoint(&ck);
    }
});
