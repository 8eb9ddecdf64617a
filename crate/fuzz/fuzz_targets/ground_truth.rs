#![no_main]

use bifnet::kitti::decode_ground_truth;
use bifnet::raster::{decode_png, PngSamples};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(PngSamples::Eight(r)) = decode_png(data) {
        if let Ok(rgb) = r.into_rgb() {
            let _ = decode_ground_truth(&rgb);
        }
    }
});
