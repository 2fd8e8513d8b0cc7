#![no_main]

use eegflow::ingest::parse_montage;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_montage(text) {
        assert!(m.len() >= 4);
        let again = parse_montage(&m.to_csv()).expect("written montage parses");
        assert_eq!(again.len(), m.len());
    }
});
