//! Affine-coupling normalizing flow with a standard-normal prior.
//!
//! Each coupling layer keeps a pass-through subset of coordinates fixed and
//! maps the rest as `x_t = k_t * exp(s(k_p)) + t(k_p)`, where
//! `s = scale_cap * tanh(net_s(k_p))`. The Jacobian is triangular, so its
//! log-determinant is the sum of the active log-scales.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Mat, ParamId, ParamSet, SplitMix64, Var};

pub const DEFAULT_LAYERS: usize = 6;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_SCALE_CAP: f64 = 2.0;

/// `0.5 * ln(2 pi)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub scale_cap: f64,
}

impl FlowConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            layers: DEFAULT_LAYERS,
            hidden: DEFAULT_HIDDEN,
            scale_cap: DEFAULT_SCALE_CAP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        if self.layers == 0 {
            return Err(Error::config("layers", "need at least one coupling layer"));
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden", "must be positive"));
        }
        if !(self.scale_cap > 0.0 && self.scale_cap.is_finite()) {
            return Err(Error::config("scale_cap", "must be positive and finite"));
        }
        Ok(())
    }

    /// Number of scalar parameters, `None` on overflow.
    pub fn param_count(&self) -> Option<usize> {
        let h = self.hidden;
        (0..self.layers).try_fold(0usize, |acc, c| {
            let mask = CouplingLayer::mask_for(c, self.dim);
            let pass = mask.iter().filter(|&&m| m).count().max(1);
            let trans = mask.iter().filter(|&&m| !m).count();
            let net = pass
                .checked_mul(h)?
                .checked_add(h)?
                .checked_add(h.checked_mul(h)?)?
                .checked_add(h)?
                .checked_add(h.checked_mul(trans)?)?
                .checked_add(trans)?;
            acc.checked_add(net.checked_mul(2)?)
        })
    }
}

/// Three-layer perceptron `tanh -> tanh -> linear`, row-vector convention.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub(crate) layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    fn new(
        params: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let w1 = params.push_uniform(format!("{prefix}.w1"), input, hidden, input, rng);
        let b1 = params.push_uniform(format!("{prefix}.b1"), 1, hidden, input, rng);
        let w2 = params.push_uniform(format!("{prefix}.w2"), hidden, hidden, hidden, rng);
        let b2 = params.push_uniform(format!("{prefix}.b2"), 1, hidden, hidden, rng);
        // Zero output layer: every coupling starts as the identity.
        let w3 = params.push(format!("{prefix}.w3"), Mat::zeros(hidden, output));
        let b3 = params.push(format!("{prefix}.b3"), Mat::zeros(1, output));
        Self {
            layers: vec![(w1, b1), (w2, b2), (w3, b3)],
        }
    }

    fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let z = g.matmul(h, vars[w.0]);
            let z = g.add(z, vars[b.0]);
            h = if i < last { g.tanh(z) } else { z };
        }
        h
    }

    fn output_layer(&self) -> (ParamId, ParamId) {
        *self.layers.last().expect("mlp has layers")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    /// `true` marks a pass-through coordinate.
    pub mask: Vec<bool>,
    pub(crate) pass: Vec<usize>,
    pub(crate) trans: Vec<usize>,
    pub(crate) scale_net: Mlp,
    pub(crate) shift_net: Mlp,
}

impl CouplingLayer {
    /// Layer `index` of a flow over `dim` coordinates. Even layers pass the
    /// first `ceil(dim/2)` coordinates through, odd layers the last
    /// `ceil(dim/2)`. With `dim == 1` nothing passes through and the nets are
    /// fed a constant input.
    pub fn mask_for(index: usize, dim: usize) -> Vec<bool> {
        if dim == 1 {
            return vec![false];
        }
        let keep = dim.div_ceil(2);
        (0..dim)
            .map(|i| {
                if index.is_multiple_of(2) {
                    i < keep
                } else {
                    i >= dim - keep
                }
            })
            .collect()
    }

    fn from_mask(mask: Vec<bool>, scale_net: Mlp, shift_net: Mlp) -> Self {
        let pass = (0..mask.len()).filter(|&i| mask[i]).collect();
        let trans = (0..mask.len()).filter(|&i| !mask[i]).collect();
        Self {
            mask,
            pass,
            trans,
            scale_net,
            shift_net,
        }
    }

    fn conditioning(&self, g: &mut Graph, k: Var) -> Var {
        if self.pass.is_empty() {
            let rows = g.value(k).rows();
            g.constant(Mat::filled(rows, 1, 1.0))
        } else {
            g.select_cols(k, &self.pass)
        }
    }

    /// Returns `(log_scale, shift)` for the given conditioning input.
    fn scale_shift(&self, g: &mut Graph, vars: &[Var], cond: Var, cap: f64) -> (Var, Var) {
        let raw = self.scale_net.forward(g, vars, cond);
        let s = g.tanh(raw);
        let s = g.scale(s, cap);
        let t = self.shift_net.forward(g, vars, cond);
        (s, t)
    }
}

/// The flow `x = Phi_C(...Phi_1(q))` together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub(crate) config: FlowConfig,
    pub(crate) layers: Vec<CouplingLayer>,
    pub params: ParamSet,
}

impl FlowModel {
    /// Fresh flow; hidden layers uniform in `+-1/sqrt(fan_in)`, output layers zero.
    pub fn new(config: FlowConfig, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut layers = Vec::with_capacity(config.layers);
        for c in 0..config.layers {
            let mask = CouplingLayer::mask_for(c, config.dim);
            let pass = mask.iter().filter(|&&m| m).count().max(1);
            let trans = mask.iter().filter(|&&m| !m).count();
            let scale_net = Mlp::new(
                &mut params,
                &format!("flow.{c}.scale"),
                pass,
                config.hidden,
                trans,
                rng,
            );
            let shift_net = Mlp::new(
                &mut params,
                &format!("flow.{c}.shift"),
                pass,
                config.hidden,
                trans,
                rng,
            );
            layers.push(CouplingLayer::from_mask(mask, scale_net, shift_net));
        }
        Ok(Self {
            config,
            layers,
            params,
        })
    }

    /// Rebuilds a model around an existing parameter set (checkpoint loading).
    pub(crate) fn from_parts(config: FlowConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(0);
        let mut model = Self::new(config, &mut rng)?;
        if model.params.len() != params.len() {
            return Err(Error::shape(format!(
                "flow expects {} tensors, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for (dst, src) in model.params.iter_mut().zip(params.iter()) {
            if dst.value.shape() != src.value.shape() {
                return Err(Error::shape(format!(
                    "{}: expected {:?}, got {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    /// Re-draws every coupling output layer uniformly in `[-bound, bound]`,
    /// moving the flow away from the identity.
    pub fn randomize_outputs(&mut self, rng: &mut SplitMix64, bound: f64) {
        for layer in &self.layers {
            for net in [&layer.scale_net, &layer.shift_net] {
                let (w, b) = net.output_layer();
                for id in [w, b] {
                    for v in self.params.value_mut(id).data_mut() {
                        *v = rng.uniform_in(-bound, bound);
                    }
                }
            }
        }
    }

    /// Sets the scale-net output bias of layer `layer` so that its log-scale
    /// is the constant `log_scale` when the output weights are zero.
    pub fn set_constant_log_scale(&mut self, layer: usize, log_scale: f64) -> Result<()> {
        let cap = self.config.scale_cap;
        if log_scale.abs() >= cap {
            return Err(Error::contract("log-scale must lie inside (-cap, cap)"));
        }
        let (w, b) = self.layers[layer].scale_net.output_layer();
        self.params.value_mut(w).fill(0.0);
        self.params.value_mut(b).fill((log_scale / cap).atanh());
        Ok(())
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.config.dim {
            return Err(Error::shape(format!(
                "flow expects dimension {}, got {len}",
                self.config.dim
            )));
        }
        Ok(())
    }

    /// Tape forward over a batch `q` (`B x d`): returns `x` (`B x d`) and the
    /// accumulated log-determinant (`B x 1`).
    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], q: Var) -> (Var, Var) {
        let cap = self.config.scale_cap;
        let mut k = q;
        let mut logdet: Option<Var> = None;
        for layer in &self.layers {
            let cond = layer.conditioning(g, k);
            let (s, t) = layer.scale_shift(g, vars, cond, cap);
            let kt = g.select_cols(k, &layer.trans);
            let es = g.exp(s);
            let xt = g.mul(kt, es);
            let xt = g.add(xt, t);
            k = if layer.pass.is_empty() {
                xt
            } else {
                let kp = g.select_cols(k, &layer.pass);
                g.merge_cols(kp, &layer.pass, xt, &layer.trans)
            };
            let ld = g.sum_rows(s);
            logdet = Some(match logdet {
                Some(acc) => g.add(acc, ld),
                None => ld,
            });
        }
        (k, logdet.expect("at least one layer"))
    }

    /// Per-row `log p(q)` (`B x 1`), including the `-(d/2) ln 2 pi` constant.
    pub fn log_likelihood_graph(&self, g: &mut Graph, vars: &[Var], q: Var) -> Var {
        let (x, logdet) = self.forward_graph(g, vars, q);
        let sq = g.mul(x, x);
        let energy = g.sum_rows(sq);
        let energy = g.scale(energy, -0.5);
        let ll = g.add(logdet, energy);
        g.offset(ll, -(self.config.dim as f64) * HALF_LN_2PI)
    }

    /// Maximum-likelihood loss: mean of `0.5 |x|^2 - logdet` (constant dropped).
    pub fn l1_graph(&self, g: &mut Graph, vars: &[Var], q: Var) -> Var {
        let (x, logdet) = self.forward_graph(g, vars, q);
        let sq = g.mul(x, x);
        let energy = g.sum_rows(sq);
        let energy = g.scale(energy, 0.5);
        let per_row = g.sub(energy, logdet);
        g.mean(per_row)
    }

    pub fn forward(&self, q: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(q.len())?;
        let (x, ld) = self.forward_batch(&Mat::row_vector(q))?;
        Ok((x.row(0).to_vec(), ld[0]))
    }

    pub fn forward_batch(&self, q: &Mat) -> Result<(Mat, Vec<f64>)> {
        self.check_dim(q.cols())?;
        let mut g = Graph::new();
        let vars = g.bind(0, &self.params);
        let qv = g.constant(q.clone());
        let (x, ld) = self.forward_graph(&mut g, &vars, qv);
        let x = g.value(x).clone();
        let ld = g.value(ld).data().to_vec();
        if !x.is_finite() || ld.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite flow output"));
        }
        Ok((x, ld))
    }

    /// Closed-form inverse, layer by layer in reverse.
    pub fn inverse(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let cap = self.config.scale_cap;
        let mut k = x.to_vec();
        for layer in self.layers.iter().rev() {
            let mut g = Graph::new();
            let vars = g.bind(0, &self.params);
            let kv = g.constant(Mat::row_vector(&k));
            let cond = layer.conditioning(&mut g, kv);
            let (s, t) = layer.scale_shift(&mut g, &vars, cond, cap);
            let (s, t) = (g.value(s), g.value(t));
            for (j, &c) in layer.trans.iter().enumerate() {
                k[c] = (k[c] - t.get(0, j)) * (-s.get(0, j)).exp();
            }
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite flow inverse"));
        }
        Ok(k)
    }

    pub fn log_likelihood(&self, q: &[f64]) -> Result<f64> {
        self.check_dim(q.len())?;
        Ok(self.log_likelihood_batch(&Mat::row_vector(q))?[0])
    }

    pub fn log_likelihood_batch(&self, q: &Mat) -> Result<Vec<f64>> {
        self.check_dim(q.cols())?;
        let mut g = Graph::new();
        let vars = g.bind(0, &self.params);
        let qv = g.constant(q.clone());
        let ll = self.log_likelihood_graph(&mut g, &vars, qv);
        let out = g.value(ll).data().to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite log-likelihood"));
        }
        Ok(out)
    }

    pub fn loss_l1(&self, batch: &[Vec<f64>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::contract("L1 over an empty batch"));
        }
        let q = Mat::from_rows(batch)?;
        self.check_dim(q.cols())?;
        let mut g = Graph::new();
        let vars = g.bind(0, &self.params);
        let qv = g.constant(q);
        let l = self.l1_graph(&mut g, &vars, qv);
        let v = g.scalar(l);
        if !v.is_finite() {
            return Err(Error::numeric("non-finite L1"));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn cfg(dim: usize, layers: usize, hidden: usize) -> FlowConfig {
        FlowConfig {
            dim,
            layers,
            hidden,
            scale_cap: DEFAULT_SCALE_CAP,
        }
    }

    fn random_flow(dim: usize, layers: usize, seed: u64) -> FlowModel {
        let mut rng = SplitMix64::new(seed);
        let mut f = FlowModel::new(cfg(dim, layers, 16), &mut rng).unwrap();
        f.randomize_outputs(&mut rng, 0.3);
        f
    }

    #[test]
    fn param_count_matches_construction() {
        for dim in [1, 2, 5, 8] {
            let cfg = FlowConfig {
                hidden: 7,
                layers: 3,
                ..FlowConfig::new(dim)
            };
            let m = FlowModel::new(cfg, &mut SplitMix64::new(0)).unwrap();
            assert_eq!(cfg.param_count(), Some(m.params.num_scalars()));
        }
    }

    #[test]
    fn identity_at_init() {
        let mut rng = SplitMix64::new(1);
        let f = FlowModel::new(FlowConfig::new(5), &mut rng).unwrap();
        let q = vec![0.3, -1.2, 2.0, 0.0, 5.5];
        let (x, ld) = f.forward(&q).unwrap();
        assert_eq!(x, q);
        assert_eq!(ld, 0.0);
        assert_eq!(f.inverse(&q).unwrap(), q);
    }

    #[test]
    fn masks_alternate_and_cover() {
        assert_eq!(
            CouplingLayer::mask_for(0, 5),
            vec![true, true, true, false, false]
        );
        assert_eq!(
            CouplingLayer::mask_for(1, 5),
            vec![false, false, true, true, true]
        );
        assert_eq!(
            CouplingLayer::mask_for(0, 4),
            vec![true, true, false, false]
        );
        assert_eq!(
            CouplingLayer::mask_for(1, 4),
            vec![false, false, true, true]
        );
        for d in 2..10 {
            for i in 0..2 {
                let m = CouplingLayer::mask_for(i, d);
                let t = m.iter().filter(|&&b| b).count();
                assert!(t >= 1 && t < d);
            }
        }
    }

    #[test]
    fn constant_log_scale_single_layer() {
        let mut rng = SplitMix64::new(2);
        let mut f = FlowModel::new(cfg(2, 1, 8), &mut rng).unwrap();
        f.set_constant_log_scale(0, 0.7).unwrap();
        let (x, ld) = f.forward(&[0.4, -1.5]).unwrap();
        assert!((ld - 0.7).abs() < 1e-12);
        assert_eq!(x[0], 0.4);
        assert!((x[1] - (-1.5 * 0.7f64.exp())).abs() < 1e-12);
    }

    #[test]
    fn inverse_matches_closed_form_single_layer() {
        // Known s, t (zero output weights, constant biases): k = (x - t) e^{-s}.
        let mut rng = SplitMix64::new(3);
        let mut f = FlowModel::new(cfg(2, 1, 8), &mut rng).unwrap();
        f.set_constant_log_scale(0, -0.4).unwrap();
        let (_, b) = f.layers[0].shift_net.output_layer();
        f.params.value_mut(b).fill(0.25);
        let x = [1.0, 2.0];
        let k = f.inverse(&x).unwrap();
        assert_eq!(k[0], 1.0);
        assert!((k[1] - (2.0 - 0.25) * 0.4f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_identity_examples() {
        let mut rng = SplitMix64::new(4);
        let f = FlowModel::new(FlowConfig::new(2), &mut rng).unwrap();
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        assert!((f.log_likelihood(&[0.0, 0.0]).unwrap() + ln2pi).abs() < 1e-12);
        assert!((f.log_likelihood(&[0.0, 0.0]).unwrap() + 1.837877).abs() < 1e-6);
        assert!((f.log_likelihood(&[1.0, 0.0]).unwrap() + ln2pi + 0.5).abs() < 1e-12);
    }

    #[test]
    fn l1_identity_examples() {
        let mut rng = SplitMix64::new(5);
        let f = FlowModel::new(FlowConfig::new(2), &mut rng).unwrap();
        assert_eq!(f.loss_l1(&[vec![0.0, 0.0]]).unwrap(), 0.0);
        assert!((f.loss_l1(&[vec![1.0, 1.0]]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(f.loss_l1(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn l1_plus_mean_loglik_is_constant() {
        let f = random_flow(6, 4, 6);
        let mut rng = SplitMix64::new(60);
        let batch: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..6).map(|_| rng.normal()).collect())
            .collect();
        let l1 = f.loss_l1(&batch).unwrap();
        let ll = f
            .log_likelihood_batch(&Mat::from_rows(&batch).unwrap())
            .unwrap();
        let mean_ll = ll.iter().sum::<f64>() / ll.len() as f64;
        assert!((l1 + mean_ll + 6.0 * HALF_LN_2PI).abs() < 1e-10);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let f = random_flow(4, 2, 7);
        assert!(matches!(f.forward(&[1.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(f.inverse(&[1.0; 5]), Err(Error::Shape(_))));
    }

    #[test]
    fn l1_gradient_two_layers_d4() {
        let f = random_flow(4, 2, 8);
        let mut rng = SplitMix64::new(80);
        let q = Mat::from_vec(5, 4, (0..20).map(|_| rng.normal()).collect()).unwrap();
        let err = grad_check(&f.params, 1e-5, |g, vars| {
            let qv = g.constant(q.clone());
            f.l1_graph(g, vars, qv)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn one_dimensional_flow_is_affine() {
        let f = random_flow(1, 3, 9);
        let a = f.forward(&[0.0]).unwrap();
        let b = f.forward(&[1.0]).unwrap();
        let c = f.forward(&[3.0]).unwrap();
        let slope = b.0[0] - a.0[0];
        assert!((c.0[0] - a.0[0] - 3.0 * slope).abs() < 1e-12);
        assert!((slope.ln() - a.1).abs() < 1e-12);
    }
}
