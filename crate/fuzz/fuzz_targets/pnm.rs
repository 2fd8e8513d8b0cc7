#![no_main]

use eegflow::formats::pnm::{decode, Pnm};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode(data) {
        let bytes = match &img {
            Pnm::Gray(g) => g.encode(),
            Pnm::Rgb(c) => c.encode(),
        };
        assert_eq!(decode(&bytes).expect("re-encoded image decodes"), img);
    }
});
