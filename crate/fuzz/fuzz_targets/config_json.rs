//! Run configuration parsing and validation.
#![no_main]
use libfuzzer_sys::fuzz_target;
use ovmr::train::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::from_json(text) {
        // a valid config survives a round trip and can lay out proposals
        let back = RunConfig::from_json(&cfg.to_json()).expect("re-parse");
        assert_eq!(back.hash(), cfg.hash());
        let _ = cfg.proposals(cfg.data.frames);
    }
});
