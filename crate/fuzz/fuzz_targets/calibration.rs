#![no_main]

use bifnet::kitti::parse_calibration_str;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(calib) = parse_calibration_str(text) {
        parse_calibration_str(&calib.to_kitti_text()).expect("re-parse written calibration");
    }
});
