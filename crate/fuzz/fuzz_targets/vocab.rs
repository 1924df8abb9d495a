#![no_main]

use libfuzzer_sys::fuzz_target;
use tmc_core::text::Vocabulary;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = Vocabulary::parse_tsv(text) {
        let again = Vocabulary::parse_tsv(&v.to_tsv()).expect("serialized vocabulary reparses");
        assert_eq!(again, v);
    }
});
