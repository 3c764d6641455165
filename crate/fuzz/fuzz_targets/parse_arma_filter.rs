#![no_main]

use asgat::approx::arma::ArmaFilter;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = ArmaFilter::parse(text);
    }
});
