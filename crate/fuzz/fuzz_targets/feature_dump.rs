#![no_main]

use decorr_cli::feature_dump::FeatureDump;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(dump) = FeatureDump::from_bytes(data) {
        assert_eq!(dump.to_bytes(), data);
    }
});
