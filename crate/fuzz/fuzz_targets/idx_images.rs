#![no_main]

use decorr_core::data::parse_idx_images;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = parse_idx_images(data) {
        assert_eq!(img.pixels.len(), img.count * img.rows * img.cols);
        assert_eq!(data.len(), 16 + img.pixels.len());
    }
});
