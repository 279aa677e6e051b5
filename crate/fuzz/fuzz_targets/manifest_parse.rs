#![no_main]

use libfuzzer_sys::fuzz_target;
use rvsl::data::manifest::{parse_record, Manifest};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Some(line) = text.lines().next() {
        let _ = parse_record(line, 1);
    }
    if let Ok(m) = Manifest::parse(text) {
        assert_eq!(Manifest::parse(&m.to_jsonl()).unwrap(), m);
    }
});
