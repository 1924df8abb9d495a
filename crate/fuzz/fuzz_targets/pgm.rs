#![no_main]

use libfuzzer_sys::fuzz_target;
use tmc_core::data::pgm;

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = pgm::parse(data) {
        let t = pgm::to_tensor(&g);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let p5 = pgm::parse(&pgm::encode_p5(&g)).expect("P5 reparses");
        let p2 = pgm::parse(&pgm::encode_p2(&g)).expect("P2 reparses");
        assert_eq!(pgm::to_tensor(&p5), t);
        assert_eq!(pgm::to_tensor(&p2), t);
    }
});
