#![no_main]

use libfuzzer_sys::fuzz_target;
use tmc_core::data::{read_splits, write_splits};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = read_splits(text) {
        assert_eq!(read_splits(&write_splits(&s)).expect("splits reparse"), s);
    }
});
