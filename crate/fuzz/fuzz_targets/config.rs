#![no_main]

use eegflow::formats::config::{parse_kv, write_kv};
use eegflow::pipeline::PipelineConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(map) = parse_kv(text) {
        assert_eq!(parse_kv(&write_kv(&map)).expect("written config parses"), map);
    }
    if let Ok(cfg) = PipelineConfig::from_kv_text(text) {
        let _ = cfg.validate();
        let _ = PipelineConfig::from_kv_text(&cfg.to_kv());
    }
});
