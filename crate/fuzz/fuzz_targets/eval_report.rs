#![no_main]

use eegflow::classifier::EvalReport;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = EvalReport::parse_csv(text) {
        let again = EvalReport::parse_csv(&r.to_csv()).expect("written report parses");
        assert_eq!(again.confusion, r.confusion);
    }
});
