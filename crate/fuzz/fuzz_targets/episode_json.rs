#![no_main]
use libfuzzer_sys::fuzz_target;
use ovmr::data::EpisodeInput;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(ep) = EpisodeInput::parse(text) {
            assert_eq!(ep.video.cols(), ep.sentence.len());
            assert_eq!(ep.words.cols(), ep.sentence.len());
        }
    }
});
