#![no_main]
use libfuzzer_sys::fuzz_target;
use ovmr::checkpoint::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok((model, prov)) = decode_checkpoint(data) {
        let again = encode_checkpoint(&model, &prov).expect("decoded checkpoint encodes");
        assert_eq!(decode_checkpoint(&again).unwrap(), (model, prov));
    }
});
