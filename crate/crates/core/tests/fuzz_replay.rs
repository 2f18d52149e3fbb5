//! Replays the fuzz target invariants over the checked-in corpus and every
//! single-bit flip of it, so the decoders are exercised on stable too.

use std::path::PathBuf;

use ovmr::checkpoint::{decode_checkpoint, encode_checkpoint};
use ovmr::data::{decode_dataset, encode_dataset, EpisodeInput};
use ovmr::train::RunConfig;

fn corpus(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| std::fs::read(p).unwrap())
        .collect()
}

/// Every seed, each single-bit flip of it and each prefix cut.
fn mutants(seeds: &[Vec<u8>], step: usize) -> impl Iterator<Item = Vec<u8>> + '_ {
    seeds.iter().flat_map(move |s| {
        let flips = (0..s.len() * 8).step_by(step).map(move |b| {
            let mut m = s.clone();
            m[b / 8] ^= 1 << (b % 8);
            m
        });
        let cuts = (0..s.len()).step_by(step).map(move |n| s[..n].to_vec());
        std::iter::once(s.clone()).chain(flips).chain(cuts)
    })
}

#[test]
fn dataset_decode_reencodes_exactly() {
    let seeds = corpus("dataset_decode");
    let mut ok = 0;
    for (k, data) in mutants(&seeds, 1).enumerate() {
        if let Ok(ds) = decode_dataset(&data) {
            ok += 1;
            assert!(encode_dataset(&ds).unwrap() == data, "mutant {k}");
        }
    }
    assert!(ok > 1);
}

#[test]
fn checkpoint_decode_roundtrips() {
    let seeds = corpus("checkpoint_decode");
    let mut ok = 0;
    for data in mutants(&seeds, 3) {
        if let Ok((model, prov)) = decode_checkpoint(&data) {
            ok += 1;
            let again = encode_checkpoint(&model, &prov).unwrap();
            assert_eq!(decode_checkpoint(&again).unwrap(), (model, prov));
        }
    }
    assert!(ok > 1);
}

#[test]
fn config_json_roundtrips() {
    for data in mutants(&corpus("config_json"), 1) {
        let Ok(text) = std::str::from_utf8(&data) else {
            continue;
        };
        if let Ok(cfg) = RunConfig::from_json(text) {
            let back = RunConfig::from_json(&cfg.to_json()).unwrap();
            assert_eq!(back.hash(), cfg.hash());
            let _ = cfg.proposals(cfg.data.frames);
        }
    }
}

#[test]
fn episode_json_shapes_agree() {
    for data in mutants(&corpus("episode_json"), 1) {
        let Ok(text) = std::str::from_utf8(&data) else {
            continue;
        };
        if let Ok(ep) = EpisodeInput::parse(text) {
            assert_eq!(ep.video.cols(), ep.sentence.len());
            assert_eq!(ep.words.cols(), ep.sentence.len());
        }
    }
}
