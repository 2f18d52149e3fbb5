//! Sliding-window proposals, the proposal scoring/regression head, the
//! positive-unlabeled split with its BCE loss, smooth-L1 boundary regression
//! and greedy NMS.
//!
//! Proposals are frame windows `[start, end)`. Timestamps are normalized by
//! the number of frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::interval_iou;
use crate::numerics::{smooth_l1, Graph, Mat, ParamId, ParamSet, SplitMix64, Var};

pub const DEFAULT_SCALES: [usize; 3] = [8, 16, 32];
pub const DEFAULT_STRIDE: usize = 4;
pub const DEFAULT_BUDGET: usize = 384;
pub const DEFAULT_NMS_IOU: f64 = 0.5;
pub const DEFAULT_HEAD_HIDDEN: usize = 32;
/// Scores are clamped to `[EPS, 1 - EPS]` inside the BCE logs.
pub const SCORE_EPS: f64 = 1e-7;
/// Anchors are clipped to `[ANCHOR_EPS, 1 - ANCHOR_EPS]` before the logit.
const ANCHOR_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentLabel {
    pub t_s: f64,
    pub t_e: f64,
}

impl MomentLabel {
    pub fn new(t_s: f64, t_e: f64) -> Result<Self> {
        let m = Self { t_s, t_e };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.t_s && self.t_s < self.t_e && self.t_e <= 1.0) {
            return Err(Error::contract(format!(
                "moment [{}, {}] is not inside [0, 1] with start < end",
                self.t_s, self.t_e
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub start: usize,
    pub end: usize,
    pub score: f64,
    pub reg_start: f64,
    pub reg_end: f64,
}

impl Proposal {
    /// Unscored window whose regressed boundaries are the window itself.
    pub fn window(start: usize, end: usize, nv: usize) -> Self {
        Self {
            start,
            end,
            score: 0.0,
            reg_start: start as f64 / nv as f64,
            reg_end: end as f64 / nv as f64,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// IoU of the frame windows.
    pub fn iou(&self, other: &Proposal) -> f64 {
        interval_iou(
            self.start as f64,
            self.end as f64,
            other.start as f64,
            other.end as f64,
        )
    }

    pub fn window_label(&self, nv: usize) -> MomentLabel {
        MomentLabel {
            t_s: self.start as f64 / nv as f64,
            t_e: self.end as f64 / nv as f64,
        }
    }

    pub fn regressed(&self) -> MomentLabel {
        MomentLabel {
            t_s: self.reg_start,
            t_e: self.reg_end,
        }
    }
}

/// Multi-scale sliding windows `[k, min(k + l, nv))` for every anchor frame
/// `k` (step `stride`) and scale `l`, deduplicated, ordered by `(start, end)`.
pub fn gen_proposals(nv: usize, scales: &[usize], stride: usize) -> Result<Vec<Proposal>> {
    if nv == 0 {
        return Err(Error::contract("no frames to propose over"));
    }
    if stride == 0 {
        return Err(Error::config("stride", "must be at least 1"));
    }
    if scales.is_empty() || scales[0] == 0 || scales.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(
            "scales",
            "must be positive and strictly ascending",
        ));
    }
    let mut spans: Vec<(usize, usize)> = (0..nv)
        .step_by(stride)
        .flat_map(|k| scales.iter().map(move |&l| (k, (k + l).min(nv))))
        .collect();
    spans.sort_unstable();
    spans.dedup();
    Ok(spans
        .into_iter()
        .map(|(s, e)| Proposal::window(s, e, nv))
        .collect())
}

/// [`gen_proposals`] capped at `budget` windows. Excess windows are dropped
/// shortest first, latest start first among equal lengths.
pub fn gen_proposals_capped(
    nv: usize,
    scales: &[usize],
    stride: usize,
    budget: usize,
) -> Result<Vec<Proposal>> {
    if budget == 0 {
        return Err(Error::config("budget", "must be at least 1"));
    }
    let mut props = gen_proposals(nv, scales, stride)?;
    if props.len() > budget {
        let mut order: Vec<usize> = (0..props.len()).collect();
        order.sort_by_key(|&i| (props[i].len(), std::cmp::Reverse(props[i].start)));
        let mut drop = vec![false; props.len()];
        for &i in &order[..props.len() - budget] {
            drop[i] = true;
        }
        let mut k = 0;
        props.retain(|_| {
            k += 1;
            !drop[k - 1]
        });
    }
    Ok(props)
}

/// Positive / unlabeled partition of a proposal list.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PuSplit {
    /// Indices in ascending order.
    pub positives: Vec<usize>,
    /// Indices in ascending order.
    pub unlabeled: Vec<usize>,
    /// The `n_s` lowest-scored unlabeled indices, lowest first.
    pub negatives: Vec<usize>,
}

impl PuSplit {
    pub fn n_s(&self) -> usize {
        self.negatives.len()
    }
}

/// Split on predicted scores: `s >= 0.5` is positive.
pub fn pu_split(scores: &[f64]) -> PuSplit {
    let positive: Vec<bool> = scores.iter().map(|&s| s >= 0.5).collect();
    pu_split_with(scores, &positive)
}

/// Split with an externally chosen positive set; pseudo-negatives are still
/// the lowest-scored unlabeled proposals (ties to the lower index).
pub fn pu_split_with(scores: &[f64], positive: &[bool]) -> PuSplit {
    assert_eq!(scores.len(), positive.len(), "one flag per score");
    let (positives, unlabeled): (Vec<usize>, Vec<usize>) =
        (0..scores.len()).partition(|&i| positive[i]);
    let n_s = positives.len().min(unlabeled.len());
    let mut ranked = unlabeled.clone();
    ranked.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    ranked.truncate(n_s);
    PuSplit {
        positives,
        unlabeled,
        negatives: ranked,
    }
}

fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

pub fn loss_bce(split: &PuSplit, scores: &[f64]) -> f64 {
    let mean = |idx: &[usize], f: &dyn Fn(f64) -> f64| {
        if idx.is_empty() {
            0.0
        } else {
            idx.iter().map(|&i| f(clamp_score(scores[i]))).sum::<f64>() / idx.len() as f64
        }
    };
    -mean(&split.positives, &|s| s.ln()) - mean(&split.negatives, &|s| (1.0 - s).ln())
}

pub fn loss_reg(split: &PuSplit, props: &[Proposal], label: &MomentLabel) -> f64 {
    if split.positives.is_empty() {
        return 0.0;
    }
    let total: f64 = split
        .positives
        .iter()
        .map(|&i| {
            smooth_l1(label.t_s - props[i].reg_start) + smooth_l1(label.t_e - props[i].reg_end)
        })
        .sum();
    total / split.positives.len() as f64
}

pub fn loss_l4(bce: f64, reg: f64) -> f64 {
    bce + reg
}

/// Tape BCE over a `P x 1` score column.
pub fn bce_graph(g: &mut Graph, scores: Var, split: &PuSplit) -> Var {
    let mut total = g.constant_scalar(0.0);
    if !split.positives.is_empty() {
        let s = g.gather_rows(scores, &split.positives);
        let s = g.clamp(s, SCORE_EPS, 1.0 - SCORE_EPS);
        let l = g.log(s);
        let m = g.mean(l);
        total = g.sub(total, m);
    }
    if !split.negatives.is_empty() {
        let s = g.gather_rows(scores, &split.negatives);
        let s = g.clamp(s, SCORE_EPS, 1.0 - SCORE_EPS);
        let s = g.scale(s, -1.0);
        let s = g.offset(s, 1.0);
        let l = g.log(s);
        let m = g.mean(l);
        total = g.sub(total, m);
    }
    total
}

/// Tape regression loss over a `P x 2` column pair of predicted boundaries.
pub fn reg_graph(g: &mut Graph, reg: Var, split: &PuSplit, label: &MomentLabel) -> Var {
    if split.positives.is_empty() {
        return g.constant_scalar(0.0);
    }
    let r = g.gather_rows(reg, &split.positives);
    let target = g.constant(Mat::row_vector(&[label.t_s, label.t_e]));
    let d = g.sub(r, target);
    let l = g.smooth_l1(d);
    let s = g.sum(l);
    g.scale(s, 1.0 / split.positives.len() as f64)
}

/// Greedy NMS on frame windows. Score ties go to the earlier start, then the
/// earlier position in `props`.
pub fn nms_select(props: &[Proposal], n: usize, iou_thresh: f64) -> Result<Vec<Proposal>> {
    if n == 0 {
        return Err(Error::contract("NMS must keep at least one proposal"));
    }
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::contract(format!(
            "NMS IoU threshold {iou_thresh} outside (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        props[b]
            .score
            .total_cmp(&props[a].score)
            .then(props[a].start.cmp(&props[b].start))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Proposal> = Vec::with_capacity(n);
    for i in order {
        if kept.len() == n {
            break;
        }
        let p = props[i];
        if kept.iter().all(|k| k.iou(&p) <= iou_thresh) {
            kept.push(p);
        }
    }
    Ok(kept)
}

/// Constant pooling operators for one proposal list over `nv` frames.
///
/// Each row of `inside` averages the window's frames; `left` and `right`
/// average equally long flanks (clipped at the video ends, falling back to
/// the window itself when a flank is empty).
#[derive(Debug, Clone)]
pub struct WindowPools {
    pub nv: usize,
    pub inside: Mat,
    pub left: Mat,
    pub right: Mat,
    /// `P x 2` logits of the window boundaries.
    pub anchors: Mat,
}

impl WindowPools {
    pub fn new(props: &[Proposal], nv: usize) -> Result<Self> {
        if props.is_empty() {
            return Err(Error::contract("no proposals to pool"));
        }
        let p = props.len();
        let mut inside = Mat::zeros(p, nv);
        let mut left = Mat::zeros(p, nv);
        let mut right = Mat::zeros(p, nv);
        let mut anchors = Mat::zeros(p, 2);
        let fill = |m: &mut Mat, r: usize, lo: usize, hi: usize| {
            let w = 1.0 / (hi - lo) as f64;
            m.row_mut(r)[lo..hi].iter_mut().for_each(|x| *x = w);
        };
        for (r, q) in props.iter().enumerate() {
            if q.is_empty() {
                return Err(Error::contract(format!(
                    "empty proposal span [{}, {})",
                    q.start, q.end
                )));
            }
            if q.end > nv {
                return Err(Error::shape(format!(
                    "proposal [{}, {}) beyond {nv} frames",
                    q.start, q.end
                )));
            }
            let len = q.len();
            fill(&mut inside, r, q.start, q.end);
            let l0 = q.start.saturating_sub(len);
            if l0 < q.start {
                fill(&mut left, r, l0, q.start);
            } else {
                fill(&mut left, r, q.start, q.end);
            }
            let r1 = (q.end + len).min(nv);
            if q.end < r1 {
                fill(&mut right, r, q.end, r1);
            } else {
                fill(&mut right, r, q.start, q.end);
            }
            let logit = |t: f64| {
                let t = t.clamp(ANCHOR_EPS, 1.0 - ANCHOR_EPS);
                (t / (1.0 - t)).ln()
            };
            anchors.set(r, 0, logit(q.start as f64 / nv as f64));
            anchors.set(r, 1, logit(q.end as f64 / nv as f64));
        }
        Ok(Self {
            nv,
            inside,
            left,
            right,
            anchors,
        })
    }

    /// Places the operators on a graph once, for reuse across episodes.
    pub fn constants(&self, g: &mut Graph) -> PoolVars {
        PoolVars {
            nv: self.nv,
            inside: g.constant(self.inside.clone()),
            left: g.constant(self.left.clone()),
            right: g.constant(self.right.clone()),
            anchors: g.constant(self.anchors.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PoolVars {
    pub nv: usize,
    pub inside: Var,
    pub left: Var,
    pub right: Var,
    pub anchors: Var,
}

/// Proposal scorer (one tanh hidden layer, sigmoid output) and boundary
/// regressor over pooled fused-frame features.
///
/// The window feature concatenates the mean fused feature inside the window,
/// its contrast with each flank, the product of the mean contrast with the
/// inside mean, and the frame attention inside and against each flank.
/// Contrasts and attention are multiplied by the frame count, which undoes
/// the `1/Nv` scale that the softmax attention puts on fused frame terms.
///
/// Boundaries are `sigmoid(features · W_r + b_r + gain * logit(window))`,
/// ordered so that start <= end.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalHead {
    pub params: ParamSet,
    dim: usize,
    hidden: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    wr: ParamId,
    br: ParamId,
    gain: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    wr: Var,
    br: Var,
    gain: Var,
}

impl ProposalHead {
    pub fn feature_dim(dim: usize) -> usize {
        4 * dim + 3
    }

    pub fn new(dim: usize, hidden: usize, rng: &mut SplitMix64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        if hidden == 0 {
            return Err(Error::config("head_hidden", "must be positive"));
        }
        let f = Self::feature_dim(dim);
        let mut params = ParamSet::new();
        let w1 = params.push_uniform("head.w1", f, hidden, f, rng);
        let b1 = params.push("head.b1", Mat::zeros(1, hidden));
        let w2 = params.push_uniform("head.w2", hidden, 1, hidden, rng);
        let b2 = params.push("head.b2", Mat::zeros(1, 1));
        let wr = params.push("head.wr", Mat::zeros(f, 2));
        let br = params.push("head.br", Mat::zeros(1, 2));
        let gain = params.push("head.gain", Mat::filled(1, 2, 1.0));
        Ok(Self {
            params,
            dim,
            hidden,
            w1,
            b1,
            w2,
            b2,
            wr,
            br,
            gain,
        })
    }

    pub(crate) fn from_parts(dim: usize, hidden: usize, params: ParamSet) -> Result<Self> {
        let mut fresh = Self::new(dim, hidden, &mut SplitMix64::new(0))?;
        crate::crossmodal::copy_params(&mut fresh.params, &params)?;
        Ok(fresh)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn vars(&self, bound: &[Var]) -> HeadVars {
        HeadVars {
            w1: bound[self.w1.0],
            b1: bound[self.b1.0],
            w2: bound[self.w2.0],
            b2: bound[self.b2.0],
            wr: bound[self.wr.0],
            br: bound[self.br.0],
            gain: bound[self.gain.0],
        }
    }

    pub fn zero_all(&mut self) {
        for p in self.params.iter_mut() {
            p.value.fill(0.0);
        }
    }
}

fn concat_cols(g: &mut Graph, parts: &[Var]) -> Var {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        let wa = g.value(acc).cols();
        let wb = g.value(p).cols();
        let a_cols: Vec<usize> = (0..wa).collect();
        let b_cols: Vec<usize> = (wa..wa + wb).collect();
        acc = g.merge_cols(acc, &a_cols, p, &b_cols);
    }
    acc
}

/// Window features, `P x (4d + 3)`.
pub fn window_features_graph(g: &mut Graph, fused: Var, attention: Var, pools: &PoolVars) -> Var {
    let nv = pools.nv as f64;
    let (pin, pl, pr) = (pools.inside, pools.left, pools.right);
    let inside = g.matmul(pin, fused);
    let left = g.matmul(pl, fused);
    let right = g.matmul(pr, fused);
    let dl = g.sub(inside, left);
    let dl = g.scale(dl, nv);
    let dr = g.sub(inside, right);
    let dr = g.scale(dr, nv);
    let contrast = g.add(dl, dr);
    let contrast = g.scale(contrast, 0.5);
    let cross = g.mul(contrast, inside);
    let a_in = g.matmul(pin, attention);
    let a_l = g.matmul(pl, attention);
    let a_r = g.matmul(pr, attention);
    let a_dl = g.sub(a_in, a_l);
    let a_dr = g.sub(a_in, a_r);
    let a = concat_cols(g, &[a_in, a_dl, a_dr]);
    let a = g.scale(a, nv);
    concat_cols(g, &[inside, dl, dr, cross, a])
}

/// Scores (`P x 1`) and ordered boundaries (`P x 2`) for every window.
pub fn head_graph(
    g: &mut Graph,
    v: &HeadVars,
    fused: Var,
    attention: Var,
    pools: &PoolVars,
) -> (Var, Var) {
    let phi = window_features_graph(g, fused, attention, pools);
    let h = g.matmul(phi, v.w1);
    let h = g.add(h, v.b1);
    let h = g.tanh(h);
    let s = g.matmul(h, v.w2);
    let s = g.add(s, v.b2);
    let s = g.sigmoid(s);

    let raw = g.matmul(phi, v.wr);
    let raw = g.add(raw, v.br);
    let prior = g.mul(pools.anchors, v.gain);
    let raw = g.add(raw, prior);
    let t = g.sigmoid(raw);
    let t0 = g.select_cols(t, &[0]);
    let t1 = g.select_cols(t, &[1]);
    let gap = g.sub(t0, t1);
    let gap = g.relu(gap);
    let lo = g.sub(t0, gap);
    let hi = g.add(t1, gap);
    let reg = g.merge_cols(lo, &[0], hi, &[1]);
    (s, reg)
}

/// Scores and regresses `props` against fused frames.
pub fn score_proposals(
    fused: &crate::crossmodal::FusedFrames,
    props: &[Proposal],
    head: &ProposalHead,
) -> Result<Vec<Proposal>> {
    let nv = fused.features.rows();
    if fused.features.cols() != head.dim {
        return Err(Error::shape(format!(
            "fused features have {} columns, head expects {}",
            fused.features.cols(),
            head.dim
        )));
    }
    if fused.attention.len() != nv {
        return Err(Error::shape("one attention weight per frame"));
    }
    let pools = WindowPools::new(props, nv)?;
    let mut g = Graph::new();
    let bound = g.bind(0, &head.params);
    let v = head.vars(&bound);
    let f = g.constant(fused.features.clone());
    let a = g.constant(Mat::col_vector(&fused.attention));
    let pv = pools.constants(&mut g);
    let (s, reg) = head_graph(&mut g, &v, f, a, &pv);
    let (s, reg) = (g.value(s), g.value(reg));
    if !s.is_finite() || !reg.is_finite() {
        return Err(Error::numeric("non-finite proposal score"));
    }
    Ok(props
        .iter()
        .enumerate()
        .map(|(i, p)| Proposal {
            score: s.get(i, 0),
            reg_start: reg.get(i, 0),
            reg_end: reg.get(i, 1),
            ..*p
        })
        .collect())
}
