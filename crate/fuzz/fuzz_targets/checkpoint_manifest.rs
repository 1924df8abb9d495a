#![no_main]

use libfuzzer_sys::fuzz_target;
use tmc_core::train::parse_manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_manifest(text) {
        let _ = m.entries.iter().map(|e| e.numel()).count();
    }
});
