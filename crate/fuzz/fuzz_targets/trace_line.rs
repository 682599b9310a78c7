#![no_main]

use cuhlm::oracle::{parse_trace, parse_trace_line};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rec) = parse_trace_line(text) {
            assert_eq!(rec.slm_logits.len(), rec.llm_logits.len());
        }
    }
    let _ = parse_trace(data, std::path::Path::new("fuzz"));
});
