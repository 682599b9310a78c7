#![no_main]

use cuhlm::pipeline::{metrics, parse_record_line};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let records: Vec<_> = text.lines().filter_map(|l| parse_record_line(l).ok()).collect();
    let _ = metrics(&records);
});
