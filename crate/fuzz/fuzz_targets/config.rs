#![no_main]

use libfuzzer_sys::fuzz_target;
use tmc_core::train::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::parse(text) {
        let _ = cfg.validate();
        // NaN fields defeat PartialEq, so compare the text forms
        let again = TrainConfig::parse(&cfg.to_text()).expect("config reparses");
        assert_eq!(again.to_text(), cfg.to_text());
    }
});
