#![no_main]

use bifnet::tensor::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = decode_checkpoint(data) {
        let back = decode_checkpoint(&encode_checkpoint(&store)).expect("re-decode");
        assert_eq!(back.len(), store.len());
    }
});
