#![no_main]

use eegflow::formats::flowfile::FlowFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(f) = FlowFile::decode(data) {
        assert_eq!(f.encode(), data);
    }
});
