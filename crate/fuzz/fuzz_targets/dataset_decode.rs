//! `OVMRDATA` decoding must reject bad input with an error, never a panic or
//! an allocation sized by untrusted counts.
#![no_main]
use libfuzzer_sys::fuzz_target;
use ovmr::data::{decode_dataset, encode_dataset};

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = decode_dataset(data) {
        // whatever decodes re-encodes to the same bytes
        let again = encode_dataset(&ds).expect("decoded dataset encodes");
        assert_eq!(again, data);
    }
});
