mod common;

use common::{auroc_pairs, cosine, nms_oracle};
use ovmr::data::{concept_anchors, generate_dataset, read_features, write_features, GenConfig};
use ovmr::metrics::{aupr, auroc};
use ovmr::numerics::SplitMix64;
use ovmr::ood_boundary::QueryLabel;
use ovmr::retrieval::{gen_proposals, gen_proposals_capped, nms_select, Proposal};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn id_queries_match_their_planted_frames_better_than_ood_queries() {
    let cfg = GenConfig {
        n_id: 200,
        n_ood: 200,
        n_videos: 200,
        ..GenConfig::default()
    };
    let ds = generate_dataset(&cfg).unwrap();
    let (mut id, mut ood) = (Vec::new(), Vec::new());
    for e in &ds.episodes {
        let nv = e.frames() as f64;
        match e.moment {
            Some(m) => {
                let lo = (m.t_s * nv).round() as usize;
                let hi = (m.t_e * nv).round() as usize;
                for f in lo..hi {
                    id.push(cosine(&e.sentence, e.video.row(f)));
                }
            }
            None => {
                for f in 0..e.frames() {
                    ood.push(cosine(&e.sentence, e.video.row(f)));
                }
            }
        }
    }
    assert!(mean(&id) > mean(&ood), "{} vs {}", mean(&id), mean(&ood));
}

/// Mean over OOD queries of the best cosine to any concept anchor.
fn ood_anchor_affinity(shift: f64) -> f64 {
    let cfg = GenConfig {
        ood_shift: shift,
        n_id: 50,
        n_ood: 300,
        n_videos: 50,
        seed: 3,
        ..GenConfig::default()
    };
    let anchors = concept_anchors(&cfg).unwrap();
    let ds = generate_dataset(&cfg).unwrap();
    let best: Vec<f64> = ds
        .episodes
        .iter()
        .filter(|e| e.label == QueryLabel::Ood)
        .map(|e| {
            anchors
                .iter()
                .map(|a| cosine(&e.sentence, a))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    mean(&best)
}

#[test]
fn ood_queries_drift_from_the_concepts_as_the_shift_grows() {
    let aff: Vec<f64> = [0.5, 1.0, 2.0, 3.0, 5.0]
        .iter()
        .map(|&s| ood_anchor_affinity(s))
        .collect();
    for w in aff.windows(2) {
        assert!(w[1] < w[0], "{aff:?}");
    }
}

#[test]
fn dataset_file_roundtrip() {
    let cfg = GenConfig {
        n_id: 30,
        n_ood: 30,
        n_videos: 10,
        frames: 16,
        dim: 6,
        ..GenConfig::default()
    };
    let ds = generate_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    write_features(&path, &ds).unwrap();
    assert_eq!(read_features(&path).unwrap(), ds);
}

#[test]
fn proposal_count_for_the_default_grid() {
    let props = gen_proposals(64, &[8, 16, 32], 4).unwrap();
    let mut spans = std::collections::BTreeSet::new();
    for k in (0..64).step_by(4) {
        for l in [8, 16, 32] {
            spans.insert((k, (k + l).min(64)));
        }
    }
    // windows clipped at the end coincide
    assert_eq!(props.len(), spans.len());
    assert!((3..=48).contains(&props.len()));
    assert!(props.iter().all(|p| p.end <= 64 && p.start < p.end));
    let capped = gen_proposals_capped(64, &[8, 16, 32], 4, 20).unwrap();
    assert_eq!(capped.len(), 20);
}

#[test]
fn nms_example_matches_the_oracle() {
    let mk = |s, e, score| Proposal {
        score,
        ..Proposal::window(s, e, 30)
    };
    let props = [mk(0, 10, 0.9), mk(1, 10, 0.8), mk(20, 30, 0.7)];
    let got = nms_select(&props, 2, 0.5).unwrap();
    assert_eq!(got, nms_oracle(&props, 2, 0.5));
    let spans: Vec<_> = got.iter().map(|p| (p.start, p.end)).collect();
    assert_eq!(spans, vec![(0, 10), (20, 30)]);
}

#[test]
fn nms_matches_the_oracle_on_random_grids() {
    let mut rng = SplitMix64::new(5);
    for _ in 0..300 {
        let nv = 8 + rng.below(40);
        let mut props = gen_proposals(nv, &[2, 4, 8], 1 + rng.below(3)).unwrap();
        for p in &mut props {
            p.score = rng.below(10) as f64 / 10.0;
        }
        let n = 1 + rng.below(8);
        let t = [0.1, 0.3, 0.5, 0.7, 0.9][rng.below(5)];
        assert_eq!(nms_select(&props, n, t).unwrap(), nms_oracle(&props, n, t));
    }
}

#[test]
fn auroc_matches_pairwise_count() {
    let mut rng = SplitMix64::new(6);
    for n in 2..=200 {
        let mut labels: Vec<QueryLabel> = (0..n)
            .map(|_| {
                if rng.uniform() < 0.3 {
                    QueryLabel::Ood
                } else {
                    QueryLabel::Id
                }
            })
            .collect();
        labels[n - 1] = QueryLabel::Ood;
        labels[0] = QueryLabel::Id;
        let scores: Vec<f64> = (0..n).map(|_| (rng.uniform() * 8.0).floor()).collect();
        let a = auroc(&scores, &labels).unwrap();
        assert!((a - auroc_pairs(&scores, &labels)).abs() <= 1e-12);
    }
}

#[test]
fn average_precision_example() {
    use QueryLabel::{Id, Ood};
    let ap = aupr(&[0.9, 0.8, 0.7], &[Id, Ood, Id]).unwrap();
    assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-12);
}
