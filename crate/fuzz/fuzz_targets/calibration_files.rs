#![no_main]

use cuhlm::calibration::{parse_model_json, read_pairs_csv, read_utv_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_model_json(text);
    }
    let _ = read_pairs_csv(data);
    if let Ok(table) = read_utv_csv(data) {
        for k in [0, 1, table.vocab_size / 2, table.vocab_size] {
            let _ = table.value_at(k);
        }
    }
});
