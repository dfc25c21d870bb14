#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(d) = kip::datasets::parse_cifar10(data) {
        assert_eq!(d.len() * kip::datasets::CIFAR_RECORD, data.len());
    }
});
