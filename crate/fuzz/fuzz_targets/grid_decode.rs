#![no_main]

use flowsr_core::gridfile::{decode_grid, encode_grid};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = decode_grid(data) {
        let bytes = encode_grid(&g);
        let again = decode_grid(&bytes).expect("re-encoded grid decodes");
        assert_eq!(encode_grid(&again), bytes);
    }
});
