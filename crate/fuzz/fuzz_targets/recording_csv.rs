#![no_main]

use eegflow::ingest::{parse_montage, parse_recording};
use libfuzzer_sys::fuzz_target;

const MONTAGE: &str = "Cz,0,0,1\nFz,0,0.6,0.8\nPz,0,-0.6,0.8\nC3,-0.6,0,0.8\n";

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let montage = parse_montage(MONTAGE).expect("fixed montage is valid");
    if let Ok(rec) = parse_recording(text, &montage, None) {
        assert_eq!(rec.channels(), montage.len());
        assert!(rec.rate > 0.0);
    }
    let _ = parse_recording(text, &montage, Some(256.0));
});
