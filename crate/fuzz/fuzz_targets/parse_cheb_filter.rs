#![no_main]

use asgat::approx::chebyshev::ChebFilter;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(f) = ChebFilter::parse(text) {
            for h in 0..f.head_count() {
                let _ = f.evaluate(1.0, h);
            }
        }
    }
});
