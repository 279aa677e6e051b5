#![no_main]

use libfuzzer_sys::fuzz_target;
use rvsl::checkpoint::{decode, encode_records};

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = decode(data) {
        let again = encode_records(records.iter().map(|(n, t)| (n.as_str(), t)));
        assert_eq!(again, data);
    }
});
