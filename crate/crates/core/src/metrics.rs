//! Temporal IoU, R@n at IoU m, AUROC and AUPR.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ood_boundary::QueryLabel;
use crate::retrieval::MomentLabel;

/// IoU of `[a0, a1]` and `[b0, b1]`; zero when disjoint or degenerate.
pub fn interval_iou(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    let inter = (a1.min(b1) - a0.max(b0)).max(0.0);
    let union = (a1 - a0) + (b1 - b0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn temporal_iou(a: &MomentLabel, b: &MomentLabel) -> f64 {
    interval_iou(a.t_s, a.t_e, b.t_s, b.t_e)
}

/// Fraction of queries with at least one of their first `n` predictions at
/// IoU strictly above `m`. An empty prediction list (a rejected query) is a
/// miss; no queries at all gives 0.
pub fn recall_at(preds: &[Vec<MomentLabel>], gts: &[MomentLabel], n: usize, m: f64) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::shape(format!(
            "{} prediction lists for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Ok(0.0);
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, gt)| p.iter().take(n).any(|q| temporal_iou(q, gt) > m))
        .count();
    Ok(hits as f64 / gts.len() as f64)
}

fn check_scored(scores: &[f64], labels: &[QueryLabel]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape("one label per score"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::numeric("NaN detection score"));
    }
    let pos = labels.iter().filter(|&&l| l == QueryLabel::Id).count();
    Ok((pos, labels.len() - pos))
}

/// Mann-Whitney AUROC with ID as the positive class: P(ID > OOD) plus half
/// the tie probability, via midranks.
pub fn auroc(scores: &[f64], labels: &[QueryLabel]) -> Result<f64> {
    let (pos, neg) = check_scored(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::contract("AUROC needs both ID and OOD scores"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let ids = order[i..=j]
            .iter()
            .filter(|&&k| labels[k] == QueryLabel::Id)
            .count();
        rank_sum += mid * ids as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision with ID as the positive class. Tied scores form one
/// threshold, so a tie group adds its recall gain at the precision reached
/// after the whole group.
pub fn aupr(scores: &[f64], labels: &[QueryLabel]) -> Result<f64> {
    let (pos, _) = check_scored(scores, labels)?;
    if pos == 0 {
        return Err(Error::contract("AUPR needs at least one ID score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let gained = order[i..=j]
            .iter()
            .filter(|&&k| labels[k] == QueryLabel::Id)
            .count();
        tp += gained;
        seen += j - i + 1;
        ap += (gained as f64 / pos as f64) * (tp as f64 / seen as f64);
        i = j + 1;
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub n: usize,
    pub iou: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// End to end: ID queries the boundary rejects count as misses.
    pub recall: Vec<RecallEntry>,
    /// Every ID test query grounded, whatever the boundary says.
    pub grounding: Vec<RecallEntry>,
    /// `None` when the test split lacks one of the two classes.
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub n_id: usize,
    pub n_ood: usize,
    /// ID queries rejected by the boundary.
    pub n_id_rejected: usize,
    /// OOD queries accepted by the boundary.
    pub n_ood_accepted: usize,
    pub config_hash: String,
    pub seed: u64,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn recall(&self, n: usize, iou: f64) -> Option<f64> {
        self.recall
            .iter()
            .find(|r| r.n == n && r.iou == iou)
            .map(|r| r.value)
    }

    pub fn grounding(&self, n: usize, iou: f64) -> Option<f64> {
        self.grounding
            .iter()
            .find(|r| r.n == n && r.iou == iou)
            .map(|r| r.value)
    }

    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let mut rows: Vec<(String, String)> = self
            .recall
            .iter()
            .map(|r| {
                (
                    format!("R@{} IoU={}", r.n, r.iou),
                    format!("{:.4}", r.value),
                )
            })
            .collect();
        rows.extend(self.grounding.iter().map(|r| {
            (
                format!("R@{} IoU={} ungated", r.n, r.iou),
                format!("{:.4}", r.value),
            )
        }));
        rows.push(("AUROC".into(), fmt(self.auroc)));
        rows.push(("AUPR".into(), fmt(self.aupr)));
        rows.push(("ID queries".into(), self.n_id.to_string()));
        rows.push(("OOD queries".into(), self.n_ood.to_string()));
        rows.push(("ID rejected".into(), self.n_id_rejected.to_string()));
        rows.push(("OOD accepted".into(), self.n_ood_accepted.to_string()));
        rows.push(("seed".into(), self.seed.to_string()));
        rows.push(("config".into(), self.config_hash.clone()));
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<w$}  {v}");
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}
