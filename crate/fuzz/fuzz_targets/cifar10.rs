#![no_main]

use decorr_core::data::{parse_cifar10, CIFAR10_RECORD_BYTES};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((labels, pixels)) = parse_cifar10(data) {
        assert_eq!(labels.len() * CIFAR10_RECORD_BYTES, data.len());
        assert_eq!(pixels.len(), labels.len() * (CIFAR10_RECORD_BYTES - 1));
        assert!(labels.iter().all(|&l| l < 10));
    }
});
