#![no_main]

use curvforge::convergence::{parse_csv, to_csv};
use curvforge::Dims;
use libfuzzer_sys::fuzz_target;

// Anything accepted must survive a write/parse round trip unchanged.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    for dims in [Dims::small(), Dims { l: 1, d_v: 2, d_k: 1, d_ff: 1 }] {
        if let Ok(samples) = parse_csv(text, dims) {
            let again = to_csv(&samples, dims).expect("parsed samples have the header dims");
            assert_eq!(parse_csv(&again, dims).expect("own output parses"), samples);
        }
    }
});
