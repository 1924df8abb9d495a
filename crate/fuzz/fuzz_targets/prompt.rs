#![no_main]

use libfuzzer_sys::fuzz_target;
use tmc_core::data::Prompt;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = Prompt::parse(text) {
        assert_eq!(Prompt::parse(&p.to_string()).expect("prompt reparses"), p);
    }
});
