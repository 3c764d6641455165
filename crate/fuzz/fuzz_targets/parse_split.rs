#![no_main]

use asgat::Split;
use libfuzzer_sys::fuzz_target;

// First byte is the node count, the rest is the split text.
fuzz_target!(|data: &[u8]| {
    let Some((&n, rest)) = data.split_first() else {
        return;
    };
    if let Ok(text) = std::str::from_utf8(rest) {
        if let Ok(s) = Split::parse(text, n as usize) {
            assert_eq!(Split::parse(&s.to_text(), n as usize).unwrap().train, s.train);
        }
    }
});
