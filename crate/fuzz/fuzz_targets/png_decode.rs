#![no_main]

use libfuzzer_sys::fuzz_target;
use rvsl::data::codec::{decode_depth, decode_rgb};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_rgb(data) {
        assert_eq!(img.shape()[0], 3);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    if let Ok(d) = decode_depth(data) {
        assert_eq!(d.rank(), 2);
    }
});
