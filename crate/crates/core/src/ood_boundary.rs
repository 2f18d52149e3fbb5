//! Likelihood-based ID/OOD decision rule.
//!
//! Log-likelihoods are divided by `h_id` and clamped into `[-1, 0]`. The ID
//! boundary `b_id` is the nearest-rank `alpha`-th percentile of the ID
//! calibration values; the OOD boundary sits a margin `delta` below it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

pub const DEFAULT_ALPHA: f64 = 5.0;
pub const DEFAULT_DELTA: f64 = 0.04;
pub const DEFAULT_H_ID: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueryLabel {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
}

impl QueryLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            QueryLabel::Id => "ID",
            QueryLabel::Ood => "OOD",
        }
    }
}

/// Log-likelihoods with their ID/OOD flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoglikSet {
    pub values: Vec<f64>,
    pub labels: Vec<QueryLabel>,
}

impl LoglikSet {
    pub fn new(values: Vec<f64>, labels: Vec<QueryLabel>) -> Result<Self> {
        if values.len() != labels.len() {
            return Err(Error::shape("values and labels differ in length"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite log-likelihood"));
        }
        Ok(Self { values, labels })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn of(&self, label: QueryLabel) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .zip(&self.labels)
            .filter(move |(_, l)| **l == label)
            .map(|(v, _)| *v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCalibration {
    pub b_id: f64,
    pub b_ood: f64,
    pub alpha: f64,
    pub delta: f64,
    pub h_id: f64,
    /// Largest raw calibration log-likelihood; reference point of the
    /// uncertainty score.
    pub max_loglik: f64,
}

fn check_h_id(h_id: f64) -> Result<()> {
    if h_id > 0.0 && h_id.is_finite() {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "h_id must be positive, got {h_id}"
        )))
    }
}

/// `clamp(logp / h_id, -1, 0)`.
pub fn normalize_loglik(logp: f64, h_id: f64) -> Result<f64> {
    check_h_id(h_id)?;
    Ok((logp / h_id).clamp(-1.0, 0.0))
}

/// `max_{q' in set} exp(log p(q')) - exp(log p(q))`.
pub fn uncertainty_score(logp: f64, set: &LoglikSet) -> Result<f64> {
    let max = set.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if set.is_empty() {
        return Err(Error::contract("uncertainty score against an empty set"));
    }
    Ok(max.exp() - logp.exp())
}

/// Nearest-rank percentile: the element at 1-based rank `ceil(alpha/100 * n)`
/// of the ascending sort (rank at least 1).
pub fn nearest_rank_percentile(values: &[f64], alpha: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("percentile of an empty sequence"));
    }
    if !(alpha > 0.0 && alpha < 100.0) {
        return Err(Error::contract(format!("alpha {alpha} outside (0, 100)")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // alpha * n first keeps integral products exact (5 * 20 / 100 == 1).
    let rank = ((alpha * sorted.len() as f64) / 100.0 - 1e-9)
        .ceil()
        .max(1.0) as usize;
    Ok(sorted[rank.min(sorted.len()) - 1])
}

/// Calibrates on already-normalized ID log-likelihoods. `h_id` is set to
/// [`DEFAULT_H_ID`] and `max_loglik` to the largest value scaled back by it.
pub fn calibrate_boundary(
    normalized_id: &[f64],
    alpha: f64,
    delta: f64,
) -> Result<BoundaryCalibration> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::contract(format!(
            "delta must be positive, got {delta}"
        )));
    }
    let b_id = nearest_rank_percentile(normalized_id, alpha)?;
    let max = normalized_id
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(BoundaryCalibration {
        b_id,
        b_ood: b_id - delta,
        alpha,
        delta,
        h_id: DEFAULT_H_ID,
        max_loglik: max * DEFAULT_H_ID,
    })
}

impl BoundaryCalibration {
    /// Calibrates from raw ID log-likelihoods.
    pub fn from_logliks(raw_id: &[f64], alpha: f64, delta: f64, h_id: f64) -> Result<Self> {
        check_h_id(h_id)?;
        let normalized: Vec<f64> = raw_id
            .iter()
            .map(|&v| normalize_loglik(v, h_id))
            .collect::<Result<_>>()?;
        let mut cal = calibrate_boundary(&normalized, alpha, delta)?;
        cal.h_id = h_id;
        cal.max_loglik = raw_id.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(cal)
    }

    pub fn validate(&self) -> Result<()> {
        check_h_id(self.h_id)?;
        let ok = self.b_id.is_finite()
            && self.delta > 0.0
            && (self.b_ood - (self.b_id - self.delta)).abs() <= 1e-12
            && self.b_id <= 0.0
            && self.b_id >= -1.0
            && self.alpha > 0.0
            && self.alpha < 100.0
            && !self.max_loglik.is_nan();
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("uncalibrated boundary {self:?}")))
        }
    }

    pub fn normalize(&self, logp: f64) -> f64 {
        (logp / self.h_id).clamp(-1.0, 0.0)
    }

    pub fn classify(&self, logp_normalized: f64) -> QueryLabel {
        classify_query(logp_normalized, self)
    }

    /// Uncertainty-score threshold equivalent to `b_id`: a query is ID iff
    /// its uncertainty is at most this value (and its normalized
    /// log-likelihood does not exceed 0, which clamping guarantees).
    pub fn uncertainty_threshold(&self) -> f64 {
        self.max_loglik.exp() - (self.b_id * self.h_id).exp()
    }
}

/// ID iff `b_id <= logp_normalized <= 0`.
pub fn classify_query(logp_normalized: f64, cal: &BoundaryCalibration) -> QueryLabel {
    if logp_normalized >= cal.b_id && logp_normalized <= 0.0 {
        QueryLabel::Id
    } else {
        QueryLabel::Ood
    }
}

/// Margin loss over normalized log-likelihoods:
/// `sum_ID |min(l - b_id, 0)| + sum_OOD |max(l - b_id + delta, 0)|`.
pub fn loss_l2(set: &LoglikSet, cal: &BoundaryCalibration) -> Result<f64> {
    cal.validate()?;
    let id: f64 = set
        .of(QueryLabel::Id)
        .map(|l| (cal.b_id - l).max(0.0))
        .sum();
    let ood: f64 = set
        .of(QueryLabel::Ood)
        .map(|l| (l - cal.b_id + cal.delta).max(0.0))
        .sum();
    Ok(id + ood)
}

/// Tape version of [`loss_l2`] on raw log-likelihood columns; normalization
/// (divide by `h_id`, clamp to `[-1, 0]`) happens on the tape so clamped
/// entries carry no gradient. Either input may be absent.
pub fn l2_graph(
    g: &mut Graph,
    id_logliks: Option<Var>,
    ood_logliks: Option<Var>,
    cal: &BoundaryCalibration,
) -> Var {
    let mut total = g.constant_scalar(0.0);
    if let Some(id) = id_logliks {
        let n = g.scale(id, 1.0 / cal.h_id);
        let n = g.clamp(n, -1.0, 0.0);
        // |min(l - b, 0)| = relu(b - l)
        let d = g.scale(n, -1.0);
        let d = g.offset(d, cal.b_id);
        let r = g.relu(d);
        let s = g.sum(r);
        total = g.add(total, s);
    }
    if let Some(ood) = ood_logliks {
        let n = g.scale(ood, 1.0 / cal.h_id);
        let n = g.clamp(n, -1.0, 0.0);
        let d = g.offset(n, cal.delta - cal.b_id);
        let r = g.relu(d);
        let s = g.sum(r);
        total = g.add(total, s);
    }
    total
}
