#![no_main]

use bifnet::kitti::{encode_velodyne, parse_velodyne};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((cloud, _)) = parse_velodyne(data) {
        // bit-exact re-encoding of what was accepted
        assert_eq!(encode_velodyne(&cloud).len(), cloud.len() * 16);
    }
});
