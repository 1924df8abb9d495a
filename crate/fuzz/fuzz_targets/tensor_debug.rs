#![no_main]

use libfuzzer_sys::fuzz_target;
use tmc_tensor::Tensor;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(t) = Tensor::parse_debug(text) {
        let s = t.to_debug_string();
        let again = Tensor::parse_debug(&s).expect("debug dump reparses");
        assert_eq!(again.to_debug_string(), s);
    }
});
