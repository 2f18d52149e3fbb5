//! Video-query matching (attentive pooling, cosine alignment) and
//! frame-query matching (per-frame relevance, frame attention, fusion).
//!
//! Features are row vectors; weight matrices act from the right, so
//! `V · M_v` pools frames and `f̂ · M3` is the fused frame term.

use crate::error::{Error, Result};
use crate::numerics::{dot, norm2, Graph, Mat, ParamId, ParamSet, SplitMix64, Var};

pub const DEFAULT_ETA: f64 = 0.2;

/// Learnable matrices of the cross-modal interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossmodalParams {
    pub params: ParamSet,
    pub eta: f64,
    dim: usize,
    m_v: ParamId,
    m_q: ParamId,
    m1: ParamId,
    m2: ParamId,
    m3: ParamId,
    m4: ParamId,
    m5: ParamId,
}

/// Handles into a graph where [`CrossmodalParams`] have been bound.
#[derive(Debug, Clone, Copy)]
pub struct CrossmodalVars {
    pub m_v: Var,
    pub m_q: Var,
    pub m1: Var,
    pub m2: Var,
    pub m3: Var,
    pub m4: Var,
    pub m5: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedFrames {
    /// `Nv x d`, one fused feature per frame.
    pub features: Mat,
    /// Frame attention, sums to one.
    pub attention: Vec<f64>,
}

impl CrossmodalParams {
    pub fn new(dim: usize, eta: f64, rng: &mut SplitMix64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        let mut params = ParamSet::new();
        let m_v = params.push_uniform("xm.m_v", dim, 1, dim, rng);
        let m_q = params.push_uniform("xm.m_q", dim, 1, dim, rng);
        let m1 = params.push_uniform("xm.m1", dim, 1, dim, rng);
        let m2 = params.push_uniform("xm.m2", dim, 1, dim, rng);
        let m3 = params.push_uniform("xm.m3", dim, dim, dim, rng);
        let m4 = params.push_uniform("xm.m4", dim, dim, dim, rng);
        let m5 = params.push_uniform("xm.m5", dim, dim, dim, rng);
        let out = Self {
            params,
            eta,
            dim,
            m_v,
            m_q,
            m1,
            m2,
            m3,
            m4,
            m5,
        };
        out.validate()?;
        Ok(out)
    }

    pub(crate) fn from_parts(dim: usize, eta: f64, params: ParamSet) -> Result<Self> {
        let mut fresh = Self::new(dim, eta, &mut SplitMix64::new(0))?;
        copy_params(&mut fresh.params, &params)?;
        Ok(fresh)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta", "temperature must be positive"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m(&self, which: Matrix) -> &Mat {
        self.params.value(self.id(which))
    }

    pub fn m_mut(&mut self, which: Matrix) -> &mut Mat {
        let id = self.id(which);
        self.params.value_mut(id)
    }

    fn id(&self, which: Matrix) -> ParamId {
        match which {
            Matrix::Mv => self.m_v,
            Matrix::Mq => self.m_q,
            Matrix::M1 => self.m1,
            Matrix::M2 => self.m2,
            Matrix::M3 => self.m3,
            Matrix::M4 => self.m4,
            Matrix::M5 => self.m5,
        }
    }

    /// Picks this module's handles out of a bound parameter list.
    pub fn vars(&self, bound: &[Var]) -> CrossmodalVars {
        CrossmodalVars {
            m_v: bound[self.m_v.0],
            m_q: bound[self.m_q.0],
            m1: bound[self.m1.0],
            m2: bound[self.m2.0],
            m3: bound[self.m3.0],
            m4: bound[self.m4.0],
            m5: bound[self.m5.0],
        }
    }

    fn check_rows(&self, what: &str, x: &Mat) -> Result<()> {
        if x.cols() != self.dim {
            return Err(Error::shape(format!(
                "{what}: expected {} columns, got {}",
                self.dim,
                x.cols()
            )));
        }
        if x.rows() == 0 {
            return Err(Error::shape(format!("{what}: no rows")));
        }
        Ok(())
    }

    fn check_vec(&self, what: &str, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::shape(format!(
                "{what}: expected length {}, got {}",
                self.dim,
                v.len()
            )));
        }
        Ok(())
    }
}

pub(crate) fn copy_params(dst: &mut ParamSet, src: &ParamSet) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::shape(format!(
            "expected {} tensors, got {}",
            dst.len(),
            src.len()
        )));
    }
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        if d.value.shape() != s.value.shape() {
            return Err(Error::shape(format!(
                "{}: expected {:?}, got {:?}",
                d.name,
                d.value.shape(),
                s.value.shape()
            )));
        }
        d.value = s.value.clone();
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Matrix {
    Mv,
    Mq,
    M1,
    M2,
    M3,
    M4,
    M5,
}

/// Softmax-weighted pooling of the rows of `x` (`N x d`) with logits `x · m`.
/// Returns the pooled row (`1 x d`) and the weights (`1 x N`).
pub fn pool_graph(g: &mut Graph, x: Var, m: Var) -> (Var, Var) {
    let logits = g.matmul(x, m);
    let logits = g.transpose(logits);
    let w = g.softmax_rows(logits);
    let pooled = g.matmul(w, x);
    (pooled, w)
}

/// Per-frame relevance `sigmoid(tanh(f_i · M1) * (q' · M2))`, `Nv x 1`.
pub fn fqm_graph(g: &mut Graph, frames: Var, q: Var, v: &CrossmodalVars) -> Var {
    let f = g.matmul(frames, v.m1);
    let f = g.tanh(f);
    let qs = g.matmul(q, v.m2);
    let z = g.mul(f, qs);
    g.sigmoid(z)
}

/// Frame attention and fusion. Returns `(fused Nv x d, attention Nv x 1)`.
pub fn fuse_graph(
    g: &mut Graph,
    frames: Var,
    words: Var,
    q: Var,
    v: &CrossmodalVars,
) -> (Var, Var) {
    let p = fqm_graph(g, frames, q, v);
    let pt = g.transpose(p);
    let a = g.softmax_rows(pt);
    let a = g.transpose(a);
    let enhanced = g.mul(frames, a);
    let frame_term = g.matmul(enhanced, v.m3);
    let word_sum = g.sum_cols(words);
    let word_term = g.matmul(word_sum, v.m4);
    let query_term = g.matmul(q, v.m5);
    let fused = g.add(frame_term, word_term);
    let fused = g.add(fused, query_term);
    (fused, a)
}

/// InfoNCE over a batch of pooled rows (`B x d` each), denominator over
/// every candidate including the positive.
pub fn l3_graph(g: &mut Graph, videos: Var, queries: Var, eta: f64) -> Var {
    let b = g.value(videos).rows();
    let vn = g.normalize_rows(videos);
    let qn = g.normalize_rows(queries);
    let qt = g.transpose(qn);
    let sims = g.matmul(vn, qt);
    let logits = g.scale(sims, 1.0 / eta);
    let lsm = g.log_softmax_rows(logits);
    let eye = g.constant(Mat::identity(b));
    let diag = g.mul(lsm, eye);
    let total = g.sum(diag);
    g.scale(total, -1.0 / b as f64)
}

pub fn attentive_pool(x: &Mat, m: &Mat) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.rows() == 0 {
        return Err(Error::shape("pooling over zero rows"));
    }
    if m.shape() != (x.cols(), 1) {
        return Err(Error::shape(format!(
            "pooling matrix {:?} for {}-dim rows",
            m.shape(),
            x.cols()
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mv = g.constant(m.clone());
    let (pooled, w) = pool_graph(&mut g, xv, mv);
    Ok((g.value(pooled).data().to_vec(), g.value(w).data().to_vec()))
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine of vectors with different lengths"));
    }
    let (na, nb) = (norm2(a), norm2(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::contract("cosine similarity with a zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Alignment loss over matched `(v'_i, q'_i)` pairs.
pub fn loss_l3(videos: &[Vec<f64>], queries: &[Vec<f64>], eta: f64) -> Result<f64> {
    if videos.len() != queries.len() {
        return Err(Error::shape("unequal numbers of videos and queries"));
    }
    if videos.len() < 2 {
        return Err(Error::contract("alignment loss needs at least two pairs"));
    }
    if eta.is_nan() || eta <= 0.0 {
        return Err(Error::contract("eta must be positive"));
    }
    for v in videos.iter().chain(queries) {
        if norm2(v) == 0.0 {
            return Err(Error::contract("zero pooled vector in alignment loss"));
        }
    }
    let mut g = Graph::new();
    let vv = g.constant(Mat::from_rows(videos)?);
    let qv = g.constant(Mat::from_rows(queries)?);
    let l = l3_graph(&mut g, vv, qv, eta);
    Ok(g.scalar(l))
}

/// `P(f_i | q')` for a single frame.
pub fn fqm_score(frame: &[f64], q: &[f64], params: &CrossmodalParams) -> Result<f64> {
    params.check_vec("frame", frame)?;
    params.check_vec("query", q)?;
    let m1 = params.m(Matrix::M1).data();
    let m2 = params.m(Matrix::M2).data();
    Ok(crate::numerics::sigmoid(dot(frame, m1).tanh() * dot(q, m2)))
}

pub fn fuse_frames(
    video: &Mat,
    words: &Mat,
    q: &[f64],
    params: &CrossmodalParams,
) -> Result<FusedFrames> {
    params.check_rows("video", video)?;
    params.check_rows("words", words)?;
    params.check_vec("query", q)?;
    let mut g = Graph::new();
    let bound = g.bind(0, &params.params);
    let v = params.vars(&bound);
    let fv = g.constant(video.clone());
    let wv = g.constant(words.clone());
    let qv = g.constant(Mat::row_vector(q));
    let (fused, a) = fuse_graph(&mut g, fv, wv, qv, &v);
    Ok(FusedFrames {
        features: g.value(fused).clone(),
        attention: g.value(a).data().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn params(dim: usize, seed: u64) -> CrossmodalParams {
        CrossmodalParams::new(dim, DEFAULT_ETA, &mut SplitMix64::new(seed)).unwrap()
    }

    fn random_mat(rows: usize, cols: usize, rng: &mut SplitMix64) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn pool_examples() {
        let row = vec![0.3, -1.0, 2.0];
        let x = Mat::from_rows(&[row.clone(), row.clone(), row.clone()]).unwrap();
        let m = Mat::col_vector(&[0.4, 0.1, -0.7]);
        let (p, _) = attentive_pool(&x, &m).unwrap();
        for (a, b) in p.iter().zip(&row) {
            assert!((a - b).abs() < 1e-15);
        }

        let x = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0], vec![2.0, 3.0]]).unwrap();
        let (p, w) = attentive_pool(&x, &Mat::zeros(2, 1)).unwrap();
        assert!(w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!((p[0] - 1.0).abs() < 1e-15 && (p[1] - 2.0).abs() < 1e-15);

        // logits (ln 3, 0)
        let x = Mat::from_rows(&[vec![3f64.ln()], vec![0.0]]).unwrap();
        let (_, w) = attentive_pool(&x, &Mat::col_vector(&[1.0])).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);

        assert!(attentive_pool(&x, &Mat::zeros(2, 1)).is_err());
    }

    #[test]
    fn cosine_examples() {
        let a = [1.0, 2.0, -0.5];
        assert!((cosine_sim(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((cosine_sim(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &a[..2]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn l3_examples() {
        // All pairwise similarities equal.
        let v = vec![vec![1.0, 0.0]; 4];
        let l = loss_l3(&v, &v, 0.2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        // Two pairs: diag 1, off-diagonal -1.
        let v = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let l = loss_l3(&v, &v, 0.2).unwrap();
        let expected = (1.0 + (-10f64).exp()).ln();
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 4.54e-5).abs() < 1e-7);

        // Temperature washout.
        let mut rng = SplitMix64::new(1);
        let vs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.normal()).collect())
            .collect();
        let qs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.normal()).collect())
            .collect();
        let l = loss_l3(&vs, &qs, 1e9).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-8);

        assert!(loss_l3(&v[..1], &v[..1], 0.2).is_err());
    }

    #[test]
    fn l3_is_permutation_invariant_and_rewards_matching() {
        let mut rng = SplitMix64::new(2);
        let vs: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.normal()).collect())
            .collect();
        let qs: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.normal()).collect())
            .collect();
        let base = loss_l3(&vs, &qs, 0.2).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let pv: Vec<_> = perm.iter().map(|&i| vs[i].clone()).collect();
        let pq: Vec<_> = perm.iter().map(|&i| qs[i].clone()).collect();
        assert!((loss_l3(&pv, &pq, 0.2).unwrap() - base).abs() < 1e-12);

        // Only sim(v_0, q_0) changes between the two batches.
        let v = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let q_far = vec![
            vec![1.0, 1.0, 1.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let q_near = vec![
            vec![1.0, 0.5, 0.5],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        assert!(loss_l3(&v, &q_near, 0.2).unwrap() < loss_l3(&v, &q_far, 0.2).unwrap());
    }

    #[test]
    fn fqm_examples() {
        let mut p = params(3, 3);
        let f = [0.2, -0.4, 1.0];
        let q = [1.0, 0.5, -0.3];
        p.m_mut(Matrix::M1).fill(0.0);
        assert_eq!(fqm_score(&f, &q, &p).unwrap(), 0.5);
        let mut p = params(3, 4);
        p.m_mut(Matrix::M2).fill(0.0);
        assert_eq!(fqm_score(&f, &q, &p).unwrap(), 0.5);

        // tanh term saturated at 1, q'·M2 = ln 3.
        let mut p = params(1, 5);
        p.m_mut(Matrix::M1).fill(100.0);
        p.m_mut(Matrix::M2).fill(3f64.ln());
        assert!((fqm_score(&[1.0], &[1.0], &p).unwrap() - 0.75).abs() < 1e-12);
        assert!(fqm_score(&[1.0, 2.0], &[1.0], &p).is_err());
    }

    #[test]
    fn fuse_examples() {
        let mut rng = SplitMix64::new(6);
        let video = random_mat(5, 3, &mut rng);
        let words = random_mat(4, 3, &mut rng);
        let q = [0.5, -0.2, 0.9];

        // M1 = 0 makes every p_i = 0.5, so attention is uniform.
        let mut p = params(3, 7);
        p.m_mut(Matrix::M1).fill(0.0);
        let fused = fuse_frames(&video, &words, &q, &p).unwrap();
        assert!(fused.attention.iter().all(|a| (a - 0.2).abs() < 1e-15));

        // M3 = 0 makes every fused row identical.
        let mut p = params(3, 8);
        p.m_mut(Matrix::M3).fill(0.0);
        let fused = fuse_frames(&video, &words, &q, &p).unwrap();
        for r in 1..5 {
            assert_eq!(fused.features.row(r), fused.features.row(0));
        }

        // Attention (0.75, 0.25) scales the first frame e1 to 0.75 e1.
        // p = (sigmoid(z1), sigmoid(z2)) with p1 - p2 = ln 3.
        let mut g = Graph::new();
        let p = g.constant(Mat::col_vector(&[3f64.ln(), 0.0]));
        let pt = g.transpose(p);
        let a = g.softmax_rows(pt);
        let a = g.transpose(a);
        let frames = g.constant(Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let e = g.mul(frames, a);
        assert!((g.value(e).get(0, 0) - 0.75).abs() < 1e-15);
        assert_eq!(g.value(e).get(0, 1), 0.0);
    }

    #[test]
    fn attention_sums_to_one() {
        let mut rng = SplitMix64::new(9);
        let p = params(4, 10);
        for _ in 0..20 {
            let video = random_mat(7, 4, &mut rng);
            let words = random_mat(3, 4, &mut rng);
            let q: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let f = fuse_frames(&video, &words, &q, &p).unwrap();
            assert!((f.attention.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for r in 0..7 {
                let s = fqm_score(video.row(r), &q, &p).unwrap();
                assert!(s > 0.0 && s < 1.0);
            }
        }
    }

    #[test]
    fn pooled_lies_in_convex_hull_box() {
        let mut rng = SplitMix64::new(12);
        for _ in 0..20 {
            let x = random_mat(6, 3, &mut rng);
            let m = random_mat(3, 1, &mut rng);
            let (p, w) = attentive_pool(&x, &m).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..3 {
                let lo = (0..6).map(|r| x.get(r, c)).fold(f64::INFINITY, f64::min);
                let hi = (0..6)
                    .map(|r| x.get(r, c))
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(p[c] >= lo - 1e-12 && p[c] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn l3_gradient_through_pooling() {
        let mut rng = SplitMix64::new(13);
        let p = params(4, 14);
        let episodes: Vec<(Mat, Mat)> = (0..3)
            .map(|_| (random_mat(5, 4, &mut rng), random_mat(3, 4, &mut rng)))
            .collect();
        let err = grad_check(&p.params, 1e-5, |g, bound| {
            let v = p.vars(bound);
            let mut vs = Vec::new();
            let mut qs = Vec::new();
            for (video, words) in &episodes {
                let fv = g.constant(video.clone());
                let wv = g.constant(words.clone());
                vs.push(pool_graph(g, fv, v.m_v).0);
                qs.push(pool_graph(g, wv, v.m_q).0);
            }
            let vs = g.stack_rows(&vs);
            let qs = g.stack_rows(&qs);
            l3_graph(g, vs, qs, 0.2)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn fusion_gradient() {
        let mut rng = SplitMix64::new(15);
        let p = params(4, 16);
        let video = random_mat(6, 4, &mut rng);
        let words = random_mat(3, 4, &mut rng);
        let probe = random_mat(6, 4, &mut rng);
        let err = grad_check(&p.params, 1e-5, |g, bound| {
            let v = p.vars(bound);
            let fv = g.constant(video.clone());
            let wv = g.constant(words.clone());
            let (q, _) = pool_graph(g, wv, v.m_q);
            let (fused, _) = fuse_graph(g, fv, wv, q, &v);
            let pr = g.constant(probe.clone());
            let prod = g.mul(fused, pr);
            let t = g.tanh(prod);
            g.sum(t)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
