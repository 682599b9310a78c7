#![no_main]

use cuhlm::channel::{decode_transcript, WireFrame};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((frame, used)) = WireFrame::decode(data) {
        assert!(used <= data.len());
        assert_eq!(frame.encode(), data[..used]);
        let _ = frame.to_vocab(usize::from(u16::MAX) + 1);
    }
    if let Ok(frames) = decode_transcript(data) {
        let mut buf = Vec::new();
        for f in &frames {
            f.encode_into(&mut buf);
        }
        assert_eq!(buf, data);
    }
});
