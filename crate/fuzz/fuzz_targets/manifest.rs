#![no_main]

use libfuzzer_sys::fuzz_target;
use tmc_core::data::read_manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = read_manifest(text) {
        for r in rows {
            assert!(!r.image_path.starts_with('/') && !r.mask_path.starts_with('/'));
        }
    }
});
