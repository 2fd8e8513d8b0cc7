#![no_main]

use eegflow::pipeline::{manifest_to_csv, parse_manifest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_manifest(text) {
        assert_eq!(parse_manifest(&manifest_to_csv(&rows)).expect("written manifest parses"), rows);
    }
});
