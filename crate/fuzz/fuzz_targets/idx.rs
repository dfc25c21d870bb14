#![no_main]

use libfuzzer_sys::fuzz_target;

// The first byte picks where the image file ends and the label file begins.
fuzz_target!(|data: &[u8]| {
    let Some((&cut, rest)) = data.split_first() else {
        return;
    };
    let cut = (cut as usize * rest.len() / 255).min(rest.len());
    let (images, labels) = rest.split_at(cut);
    let _ = kip::datasets::parse_idx_images(images);
    let _ = kip::datasets::parse_idx_labels(labels);
    if let Ok(d) = kip::datasets::parse_idx(images, labels) {
        assert_eq!(d.images.len(), d.labels.len());
    }
});
