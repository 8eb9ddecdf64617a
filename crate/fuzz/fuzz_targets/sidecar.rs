#![no_main]

use bifnet::formats::Sidecar;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = Sidecar::parse(text) {
        assert_eq!(Sidecar::parse(&s.to_text()).expect("re-parse"), s);
    }
});
