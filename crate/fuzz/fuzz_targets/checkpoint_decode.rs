#![no_main]

use flowsr_core::checkpoint::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&c);
        let again = decode_checkpoint(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(encode_checkpoint(&again), bytes);
        let _ = c.model_config();
        let _ = c.scalers();
    }
});
