//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use ovmr::flow::FlowModel;
use ovmr::numerics::{Mat, SplitMix64};
use ovmr::ood_boundary::QueryLabel;
use ovmr::retrieval::Proposal;

/// `ln |det J|` of the flow at `q`, with `J` from central differences.
pub fn fd_logdet(flow: &FlowModel, q: &[f64], h: f64) -> f64 {
    let d = q.len();
    let mut jac = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut up = q.to_vec();
        let mut dn = q.to_vec();
        up[j] += h;
        dn[j] -= h;
        let (xu, _) = flow.forward(&up).unwrap();
        let (xd, _) = flow.forward(&dn).unwrap();
        for i in 0..d {
            jac[(i, j)] = (xu[i] - xd[i]) / (2.0 * h);
        }
    }
    jac.determinant().abs().ln()
}

/// Midpoint-rule integral of the flow density over `[-r, r]^d` for `d <= 2`.
pub fn density_mass(flow: &FlowModel, r: f64, cells: usize) -> f64 {
    let d = flow.dim();
    assert!(d == 1 || d == 2);
    let h = 2.0 * r / cells as f64;
    let mid = |k: usize| -r + (k as f64 + 0.5) * h;
    let rows: Vec<Vec<f64>> = if d == 1 {
        (0..cells).map(|k| vec![mid(k)]).collect()
    } else {
        (0..cells * cells)
            .map(|k| vec![mid(k / cells), mid(k % cells)])
            .collect()
    };
    let mut sum = 0.0;
    for chunk in rows.chunks(8192) {
        let ll = flow
            .log_likelihood_batch(&Mat::from_rows(chunk).unwrap())
            .unwrap();
        sum += ll.iter().map(|v| v.exp()).sum::<f64>();
    }
    sum * h.powi(d as i32)
}

/// Frame-window IoU in integers.
fn window_iou(a: &Proposal, b: &Proposal) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = (a.end - a.start) + (b.end - b.start) - inter;
    inter as f64 / union as f64
}

/// Pick the best remaining proposal, drop everything overlapping it by more
/// than `thresh`, repeat.
pub fn nms_oracle(props: &[Proposal], n: usize, thresh: f64) -> Vec<Proposal> {
    let mut alive: Vec<usize> = (0..props.len()).collect();
    let mut kept = Vec::new();
    while kept.len() < n && !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive[1..] {
            let (p, b) = (&props[i], &props[best]);
            let better = p.score > b.score
                || (p.score == b.score && (p.start < b.start || (p.start == b.start && i < best)));
            if better {
                best = i;
            }
        }
        let chosen = props[best];
        kept.push(chosen);
        alive.retain(|&i| i != best && window_iou(&props[i], &chosen) <= thresh);
    }
    kept
}

/// Fraction of (ID, OOD) pairs ordered correctly, ties counting one half.
pub fn auroc_pairs(scores: &[f64], labels: &[QueryLabel]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, li) in labels.iter().enumerate() {
        if *li != QueryLabel::Id {
            continue;
        }
        for (j, lj) in labels.iter().enumerate() {
            if *lj != QueryLabel::Ood {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn gaussian_rows(n: usize, d: usize, rng: &mut SplitMix64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.normal()).collect())
        .collect()
}
