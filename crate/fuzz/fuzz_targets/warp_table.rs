#![no_main]

use bifnet::formats::{decode_warp_table, encode_warp_table};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = decode_warp_table(data) {
        table.check_invariants().expect("decoded table is consistent");
        let again = decode_warp_table(&encode_warp_table(&table)).expect("re-decode");
        assert_eq!(again.valid, table.valid);
    }
});
