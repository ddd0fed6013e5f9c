#![no_main]

use curvforge::convergence::{DataKind, DatasetSource};
use curvforge::Dims;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(spec) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(src) = DatasetSource::parse(spec, Dims::small(), 1) else {
        return;
    };
    match &src.kind {
        DataKind::Synthetic { count, .. } => {
            assert!(*count >= 1);
            if *count <= 64 {
                assert_eq!(src.load().expect("synthetic loads").len(), *count);
            }
        }
        DataKind::Csv(path) => assert!(!path.as_os_str().is_empty()),
    }
});
