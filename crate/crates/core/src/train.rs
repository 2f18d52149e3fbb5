//! Run configuration, the joint training loop, evaluation and calibration.
//!
//! One batch contributes `L1 + l1*L2 + l2*L3 + l3*L4` (the `lambda*` fields):
//! the flow's likelihood loss and boundary margin on the batch's ID and
//! OOD sentences, InfoNCE alignment of pooled video and query features, and
//! the proposal BCE plus boundary regression of every ID episode.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Provenance;
use crate::crossmodal::{fuse_graph, l3_graph, pool_graph, CrossmodalParams, DEFAULT_ETA};
use crate::data::{hex, make_batches, Dataset, EpisodeSample, GenConfig, Split};
use crate::error::{Error, Result};
use crate::flow::{
    FlowConfig, FlowModel, DEFAULT_HIDDEN, DEFAULT_LAYERS, DEFAULT_SCALE_CAP, HALF_LN_2PI,
};
use crate::metrics::{aupr, auroc, recall_at, temporal_iou, EvalReport, RecallEntry};
use crate::model::{Model, Prediction};
use crate::numerics::{Adam, Graph, Mat, ParamSet, SplitMix64, Var, DEFAULT_LR};
use crate::ood_boundary::{
    l2_graph, BoundaryCalibration, QueryLabel, DEFAULT_ALPHA, DEFAULT_DELTA, DEFAULT_H_ID,
};
use crate::retrieval::{
    bce_graph, gen_proposals_capped, head_graph, nms_select, pu_split, pu_split_with, reg_graph,
    MomentLabel, PoolVars, Proposal, ProposalHead, WindowPools, DEFAULT_BUDGET,
    DEFAULT_HEAD_HIDDEN, DEFAULT_NMS_IOU, DEFAULT_SCALES, DEFAULT_STRIDE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// One optimizer over every module and the full objective.
    Joint,
    /// Flow first on its own terms, then the retrieval modules.
    TwoStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryMode {
    /// Recompute the boundary from the current flow at every epoch start.
    Recalibrate,
    /// Calibrate once from the initial flow and keep that boundary.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PuPositives {
    /// Proposals the head itself scores at 0.5 or more.
    Score,
    /// Proposals overlapping the annotated moment by at least `pu_iou`.
    Iou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub eta: f64,
    pub alpha: f64,
    pub delta: f64,
    pub h_id: f64,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub scale_cap: f64,
    pub head_hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Share of the training split held out for early stopping.
    pub val_fraction: f64,
    pub patience: usize,
    pub scales: Vec<usize>,
    pub stride: usize,
    pub budget: usize,
    pub nms_n: usize,
    pub nms_iou: f64,
    pub recall_n: Vec<usize>,
    pub recall_iou: Vec<f64>,
    pub pu_positives: PuPositives,
    pub pu_iou: f64,
    pub boundary: BoundaryMode,
    pub stage: Stage,
    /// Generator settings used by `gen-data`.
    pub data: GenConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.6,
            lambda2: 0.3,
            lambda3: 0.7,
            eta: DEFAULT_ETA,
            alpha: DEFAULT_ALPHA,
            delta: DEFAULT_DELTA,
            h_id: DEFAULT_H_ID,
            flow_layers: DEFAULT_LAYERS,
            flow_hidden: DEFAULT_HIDDEN,
            scale_cap: DEFAULT_SCALE_CAP,
            head_hidden: DEFAULT_HEAD_HIDDEN,
            lr: DEFAULT_LR,
            batch_size: 128,
            epochs: 200,
            seed: 0,
            val_fraction: 0.1,
            patience: 20,
            scales: DEFAULT_SCALES.to_vec(),
            stride: DEFAULT_STRIDE,
            budget: DEFAULT_BUDGET,
            nms_n: 5,
            nms_iou: DEFAULT_NMS_IOU,
            recall_n: vec![1, 5],
            recall_iou: vec![0.3, 0.5, 0.7],
            pu_positives: PuPositives::Iou,
            pu_iou: 0.5,
            boundary: BoundaryMode::Recalibrate,
            stage: Stage::Joint,
            data: GenConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(field, msg));
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, "must be finite and non-negative");
            }
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta", "must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha < 100.0) {
            return bad("alpha", "must be a percentage in (0, 100)");
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad("delta", "must be positive");
        }
        if !(self.h_id > 0.0 && self.h_id.is_finite()) {
            return bad("h_id", "must be positive");
        }
        if !(1..=1024).contains(&self.flow_layers) {
            return bad("flow_layers", "must be in 1..=1024");
        }
        if !(1..=1 << 16).contains(&self.flow_hidden) {
            return bad("flow_hidden", "must be in 1..=65536");
        }
        if !(self.scale_cap > 0.0 && self.scale_cap.is_finite()) {
            return bad("scale_cap", "must be positive");
        }
        if !(1..=1 << 16).contains(&self.head_hidden) {
            return bad("head_hidden", "must be in 1..=65536");
        }
        if self.scales.len() > 16 {
            return bad("scales", "at most 16 scales");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction", "must be in [0, 1)");
        }
        if self.patience == 0 {
            return bad("patience", "must be at least 1");
        }
        if self.nms_n == 0 {
            return bad("nms_n", "must be at least 1");
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return bad("nms_iou", "must be in (0, 1)");
        }
        if self.recall_n.is_empty() || self.recall_n.contains(&0) {
            return bad("recall_n", "needs positive entries");
        }
        if self.recall_iou.is_empty() || self.recall_iou.iter().any(|m| !(0.0..1.0).contains(m)) {
            return bad("recall_iou", "needs entries in [0, 1)");
        }
        if !(self.pu_iou > 0.0 && self.pu_iou <= 1.0) {
            return bad("pu_iou", "must be in (0, 1]");
        }
        if self.budget == 0 {
            return bad("budget", "must be at least 1");
        }
        // proposal settings are checked against a frame count here
        gen_proposals_capped(
            self.data.frames.max(1),
            &self.scales,
            self.stride,
            self.budget,
        )?;
        self.data.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_json().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.hash())
    }

    pub fn flow_config(&self, dim: usize) -> FlowConfig {
        FlowConfig {
            dim,
            layers: self.flow_layers,
            hidden: self.flow_hidden,
            scale_cap: self.scale_cap,
        }
    }

    pub fn proposals(&self, nv: usize) -> Result<Vec<Proposal>> {
        gen_proposals_capped(nv, &self.scales, self.stride, self.budget)
    }
}

/// Per-epoch training record, written as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    #[serde(rename = "L1")]
    pub l1: Option<f64>,
    #[serde(rename = "L2")]
    pub l2: Option<f64>,
    #[serde(rename = "L3")]
    pub l3: Option<f64>,
    #[serde(rename = "L4")]
    pub l4: Option<f64>,
    pub total: f64,
    pub b_id: f64,
    pub val_total: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub logs: Vec<EpochLog>,
    /// Epoch whose parameters were kept, per stage.
    pub best_epochs: Vec<usize>,
    pub provenance: Provenance,
}

/// Which loss terms a phase optimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Terms {
    flow: bool,
    retrieval: bool,
}

#[derive(Debug, Clone, Copy, Default)]
struct LossValues {
    l1: Option<f64>,
    l2: Option<f64>,
    l3: Option<f64>,
    l4: Option<f64>,
    total: f64,
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    episodes: Vec<&'a EpisodeSample>,
    pools: WindowPools,
    /// Proposal indices overlapping each episode's moment by `pu_iou`.
    overlap: Vec<Vec<bool>>,
    dim: usize,
}

const FLOW: usize = 0;
const XM: usize = 1;
const HEAD: usize = 2;

impl<'a> Trainer<'a> {
    fn new(
        cfg: &'a RunConfig,
        episodes: Vec<&'a EpisodeSample>,
        dim: usize,
        nv: usize,
    ) -> Result<Self> {
        let props = cfg.proposals(nv)?;
        let pools = WindowPools::new(&props, nv)?;
        let overlap = episodes
            .iter()
            .map(|e| match e.moment {
                Some(m) => props
                    .iter()
                    .map(|p| temporal_iou(&p.window_label(nv), &m) >= cfg.pu_iou)
                    .collect(),
                None => Vec::new(),
            })
            .collect();
        Ok(Self {
            cfg,
            episodes,
            pools,
            overlap,
            dim,
        })
    }

    /// Builds the batch objective on `g`. `id` and `ood` index `self.episodes`.
    #[allow(clippy::too_many_arguments)]
    fn objective(
        &self,
        g: &mut Graph,
        model: &Model,
        cal: &BoundaryCalibration,
        id: &[usize],
        ood: &[usize],
        terms: Terms,
        where_: &str,
    ) -> Result<(Var, LossValues)> {
        let cfg = self.cfg;
        let fv = g.bind(FLOW, &model.flow.params);
        let xv = g.bind(XM, &model.crossmodal.params);
        let hv = g.bind(HEAD, &model.head.params);
        let mut vals = LossValues::default();
        let mut total = g.constant_scalar(0.0);
        let check = |name: &str, v: f64| -> Result<f64> {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::numeric(format!("{name} is {v} {where_}")))
            }
        };

        if terms.flow {
            let rows: Vec<Vec<f64>> = id
                .iter()
                .chain(ood)
                .map(|&i| self.episodes[i].sentence.clone())
                .collect();
            let q = g.constant(Mat::from_rows(&rows)?);
            let ll = model.flow.log_likelihood_graph(g, &fv, q);
            let ll_id = g.gather_rows(ll, &(0..id.len()).collect::<Vec<_>>());
            let ll_ood = if ood.is_empty() {
                None
            } else {
                Some(g.gather_rows(ll, &(id.len()..id.len() + ood.len()).collect::<Vec<_>>()))
            };
            // mean(0.5|x|^2 - logdet) = -mean(log p) - (d/2) ln 2pi
            let m = g.mean(ll_id);
            let l1 = g.scale(m, -1.0);
            let l1 = g.offset(l1, -(self.dim as f64) * HALF_LN_2PI);
            let l2 = l2_graph(g, Some(ll_id), ll_ood, cal);
            vals.l1 = Some(check("L1", g.scalar(l1))?);
            vals.l2 = Some(check("L2", g.scalar(l2))?);
            total = g.add(total, l1);
            let w = g.scale(l2, cfg.lambda1);
            total = g.add(total, w);
        }

        if terms.retrieval && (cfg.lambda2 > 0.0 || cfg.lambda3 > 0.0) {
            let xm = model.crossmodal.vars(&xv);
            let head = model.head.vars(&hv);
            let pools: PoolVars = self.pools.constants(g);
            let mut videos = Vec::with_capacity(id.len());
            let mut queries = Vec::with_capacity(id.len());
            let mut l4_sum: Option<Var> = None;
            for &i in id {
                let e = self.episodes[i];
                let v = g.constant(e.video.clone());
                let w = g.constant(e.words.clone());
                let (vp, _) = pool_graph(g, v, xm.m_v);
                let (qp, _) = pool_graph(g, w, xm.m_q);
                videos.push(vp);
                queries.push(qp);
                if cfg.lambda3 > 0.0 {
                    let (fused, attn) = fuse_graph(g, v, w, qp, &xm);
                    let (s, reg) = head_graph(g, &head, fused, attn, &pools);
                    let scores = g.value(s).data().to_vec();
                    let split = match cfg.pu_positives {
                        PuPositives::Score => pu_split(&scores),
                        PuPositives::Iou => pu_split_with(&scores, &self.overlap[i]),
                    };
                    let label: MomentLabel = e.moment.expect("ID episode has a moment");
                    let b = bce_graph(g, s, &split);
                    let r = reg_graph(g, reg, &split, &label);
                    let l = g.add(b, r);
                    l4_sum = Some(match l4_sum {
                        Some(acc) => g.add(acc, l),
                        None => l,
                    });
                }
            }
            if cfg.lambda2 > 0.0 {
                let vs = g.stack_rows(&videos);
                let qs = g.stack_rows(&queries);
                let l3 = l3_graph(g, vs, qs, cfg.eta);
                vals.l3 = Some(check("L3", g.scalar(l3))?);
                let w = g.scale(l3, cfg.lambda2);
                total = g.add(total, w);
            }
            if let Some(sum) = l4_sum {
                let l4 = g.scale(sum, 1.0 / id.len() as f64);
                vals.l4 = Some(check("L4", g.scalar(l4))?);
                let w = g.scale(l4, cfg.lambda3);
                total = g.add(total, w);
            }
        }
        vals.total = check("total loss", g.scalar(total))?;
        Ok((total, vals))
    }

    fn calibrate(&self, model: &Model, id: &[usize]) -> Result<BoundaryCalibration> {
        let rows: Vec<Vec<f64>> = id
            .iter()
            .map(|&i| self.episodes[i].sentence.clone())
            .collect();
        let ll = model.flow.log_likelihood_batch(&Mat::from_rows(&rows)?)?;
        if ll.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "non-finite log-likelihood during calibration",
            ));
        }
        BoundaryCalibration::from_logliks(&ll, self.cfg.alpha, self.cfg.delta, self.cfg.h_id)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_phase(
        &self,
        model: &mut Model,
        cal: &mut BoundaryCalibration,
        split: &Splits,
        terms: Terms,
        stage: &str,
        rng: &mut SplitMix64,
        log: &mut dyn FnMut(&EpochLog),
        logs: &mut Vec<EpochLog>,
    ) -> Result<usize> {
        let cfg = self.cfg;
        let mut adam = Adam::new(cfg.lr);
        let mut best: Option<(f64, usize, [ParamSet; 3], BoundaryCalibration)> = None;
        let mut since_best = 0;
        for epoch in 1..=cfg.epochs {
            if terms.flow && (cfg.boundary == BoundaryMode::Recalibrate || epoch == 1) {
                *cal = self.calibrate(model, &split.train_id)?;
            }
            let batches = make_batches(&split.train_id, &split.train_ood, cfg.batch_size, rng)?;
            let mut sums = [0.0f64; 5];
            let mut seen = [false; 4];
            for (b, batch) in batches.iter().enumerate() {
                let mut g = Graph::new();
                let at = format!("in {stage} epoch {epoch} batch {}", b + 1);
                let (total, vals) =
                    self.objective(&mut g, model, cal, &batch.id, &batch.ood, terms, &at)?;
                for (k, v) in [vals.l1, vals.l2, vals.l3, vals.l4].into_iter().enumerate() {
                    if let Some(v) = v {
                        sums[k] += v;
                        seen[k] = true;
                    }
                }
                sums[4] += vals.total;
                g.backward(total);
                g.accumulate(FLOW, &mut model.flow.params);
                g.accumulate(XM, &mut model.crossmodal.params);
                g.accumulate(HEAD, &mut model.head.params);
                let replaced = adam.step(&mut [
                    &mut model.flow.params,
                    &mut model.crossmodal.params,
                    &mut model.head.params,
                ]);
                if replaced > 0 {
                    return Err(Error::numeric(format!(
                        "{replaced} non-finite gradient entries {at}"
                    )));
                }
            }
            let nb = batches.len() as f64;
            let mean = |k: usize| seen[k].then(|| sums[k] / nb);
            let val_total = if split.val_id.len() >= 2 {
                let mut g = Graph::new();
                let at = format!("on validation after {stage} epoch {epoch}");
                let (_, v) = self.objective(
                    &mut g,
                    model,
                    cal,
                    &split.val_id,
                    &split.val_ood,
                    terms,
                    &at,
                )?;
                Some(v.total)
            } else {
                None
            };
            let entry = EpochLog {
                stage: stage.to_string(),
                epoch,
                l1: mean(0),
                l2: mean(1),
                l3: mean(2),
                l4: mean(3),
                total: sums[4] / nb,
                b_id: cal.b_id,
                val_total,
            };
            log(&entry);
            logs.push(entry);

            let monitored = val_total.unwrap_or(sums[4] / nb);
            if best.as_ref().is_none_or(|(b, ..)| monitored < *b) {
                let snapshot = [
                    model.flow.params.clone(),
                    model.crossmodal.params.clone(),
                    model.head.params.clone(),
                ];
                best = Some((monitored, epoch, snapshot, *cal));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
        let (_, best_epoch, [f, x, h], best_cal) = best.expect("at least one epoch");
        model.flow.params = f;
        model.crossmodal.params = x;
        model.head.params = h;
        *cal = best_cal;
        Ok(best_epoch)
    }
}

/// Indices into the training episode list.
struct Splits {
    train_id: Vec<usize>,
    train_ood: Vec<usize>,
    val_id: Vec<usize>,
    val_ood: Vec<usize>,
}

fn carve(idx: Vec<usize>, fraction: f64, rng: &mut SplitMix64) -> (Vec<usize>, Vec<usize>) {
    let mut idx = idx;
    rng.shuffle(&mut idx);
    let n_val = (fraction * idx.len() as f64).round() as usize;
    let val = idx.split_off(idx.len() - n_val);
    let (mut train, mut val) = (idx, val);
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Trains on the dataset's training split. `log` sees every epoch record as
/// it is produced.
pub fn train(
    cfg: &RunConfig,
    ds: &Dataset,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (dim, nv) = ds.check_uniform()?;
    let episodes: Vec<&EpisodeSample> = ds.of_split(Split::Train).collect();
    let by = |label| {
        (0..episodes.len())
            .filter(|&i| episodes[i].label == label)
            .collect::<Vec<_>>()
    };
    let mut rng = SplitMix64::new(cfg.seed);
    let (train_id, val_id) = carve(by(QueryLabel::Id), cfg.val_fraction, &mut rng);
    let (train_ood, val_ood) = carve(by(QueryLabel::Ood), cfg.val_fraction, &mut rng);
    if train_id.len() < 2 {
        return Err(Error::contract(format!(
            "{} ID training queries; at least two are needed",
            train_id.len()
        )));
    }
    let splits = Splits {
        train_id,
        train_ood,
        val_id,
        val_ood,
    };

    let mut init = rng.fork();
    let flow = FlowModel::new(cfg.flow_config(dim), &mut init)?;
    let crossmodal = CrossmodalParams::new(dim, cfg.eta, &mut init)?;
    let head = ProposalHead::new(dim, cfg.head_hidden, &mut init)?;
    let trainer = Trainer::new(cfg, episodes, dim, nv)?;
    let mut model = Model {
        flow,
        calibration: BoundaryCalibration::from_logliks(&[0.0], cfg.alpha, cfg.delta, cfg.h_id)?,
        crossmodal,
        head,
    };
    let mut cal = trainer.calibrate(&model, &splits.train_id)?;
    let mut logs = Vec::new();
    let mut best_epochs = Vec::new();
    let mut batch_rng = rng.fork();
    let phases: &[(&str, Terms)] = match cfg.stage {
        Stage::Joint => &[(
            "joint",
            Terms {
                flow: true,
                retrieval: true,
            },
        )],
        Stage::TwoStage => &[
            (
                "flow",
                Terms {
                    flow: true,
                    retrieval: false,
                },
            ),
            (
                "retrieval",
                Terms {
                    flow: false,
                    retrieval: true,
                },
            ),
        ],
    };
    for &(name, terms) in phases {
        let best = trainer.run_phase(
            &mut model,
            &mut cal,
            &splits,
            terms,
            name,
            &mut batch_rng,
            log,
            &mut logs,
        )?;
        best_epochs.push(best);
    }
    if cfg.boundary == BoundaryMode::Recalibrate {
        cal = trainer.calibrate(&model, &splits.train_id)?;
    }
    model.calibration = cal;
    model.validate()?;
    let provenance = provenance(cfg, ds, &best_epochs);
    Ok(TrainOutcome {
        model,
        logs,
        best_epochs,
        provenance,
    })
}

pub fn provenance(cfg: &RunConfig, ds: &Dataset, best_epochs: &[usize]) -> Provenance {
    let json = serde_json::json!({
        "config": cfg,
        "config_hash": cfg.hash_hex(),
        "seed": cfg.seed,
        "data_config_hash": ds.config_hash_hex(),
        "data_seed": ds.seed,
        "best_epochs": best_epochs,
    });
    Provenance {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        json: json.to_string(),
    }
}

/// Detection score of a raw log-likelihood: `logp / h_id` without the
/// clamp, so that queries beyond the normalization range stay ordered.
pub fn detection_score(loglik: f64, h_id: f64) -> f64 {
    loglik / h_id
}

/// Classifies every test query, retrieves moments for those accepted as ID
/// and scores the run.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    cfg: &RunConfig,
) -> Result<(EvalReport, Vec<Prediction>)> {
    cfg.validate()?;
    model.validate()?;
    let (dim, nv) = ds.check_uniform()?;
    if dim != model.dim() {
        return Err(Error::contract(format!(
            "dataset has {dim}-dim features, checkpoint expects {}",
            model.dim()
        )));
    }
    let props = cfg.proposals(nv)?;
    let test: Vec<&EpisodeSample> = ds.of_split(Split::Test).collect();
    let preds = test
        .iter()
        .map(|e| model.predict(e, &props, cfg.nms_n, cfg.nms_iou))
        .collect::<Result<Vec<_>>>()?;

    let mut gts = Vec::new();
    let mut lists = Vec::new();
    let mut ungated = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let (mut id_rejected, mut ood_accepted) = (0, 0);
    for (e, p) in test.iter().zip(&preds) {
        scores.push(detection_score(p.loglik, model.calibration.h_id));
        labels.push(e.label);
        match e.label {
            QueryLabel::Id => {
                gts.push(e.moment.expect("ID episode has a moment"));
                let accepted: Vec<MomentLabel> = p
                    .moments
                    .iter()
                    .map(|m| MomentLabel {
                        t_s: m.t_s,
                        t_e: m.t_e,
                    })
                    .collect();
                if p.verdict == QueryLabel::Ood {
                    id_rejected += 1;
                    let top = nms_select(&model.score(e, &props)?, cfg.nms_n, cfg.nms_iou)?;
                    ungated.push(top.iter().map(Proposal::regressed).collect());
                } else {
                    ungated.push(accepted.clone());
                }
                lists.push(accepted);
            }
            QueryLabel::Ood => {
                if p.verdict == QueryLabel::Id {
                    ood_accepted += 1;
                }
            }
        }
    }
    let table = |lists: &[Vec<MomentLabel>]| -> Result<Vec<RecallEntry>> {
        let mut out = Vec::new();
        for &n in &cfg.recall_n {
            for &m in &cfg.recall_iou {
                out.push(RecallEntry {
                    n,
                    iou: m,
                    value: recall_at(lists, &gts, n, m)?,
                });
            }
        }
        Ok(out)
    };
    let recall = table(&lists)?;
    let grounding = table(&ungated)?;
    let n_id = gts.len();
    let n_ood = labels.len() - n_id;
    let mut notes = Vec::new();
    let (auroc_v, aupr_v) = if n_id > 0 && n_ood > 0 {
        (
            Some(auroc(&scores, &labels)?),
            Some(aupr(&scores, &labels)?),
        )
    } else {
        notes.push("detection metrics need both ID and OOD test queries".to_string());
        (None, None)
    };
    if n_id == 0 {
        notes.push("no ID test queries; recall reported as 0".to_string());
    }
    let report = EvalReport {
        recall,
        grounding,
        auroc: auroc_v,
        aupr: aupr_v,
        n_id,
        n_ood,
        n_id_rejected: id_rejected,
        n_ood_accepted: ood_accepted,
        config_hash: cfg.hash_hex(),
        seed: cfg.seed,
        notes,
    };
    Ok((report, preds))
}

/// Recomputes the boundary from the dataset's ID training queries.
pub fn recalibrate(
    model: &mut Model,
    ds: &Dataset,
    cfg: &RunConfig,
) -> Result<BoundaryCalibration> {
    cfg.validate()?;
    let (dim, _) = ds.check_uniform()?;
    if dim != model.dim() {
        return Err(Error::contract(format!(
            "dataset has {dim}-dim features, checkpoint expects {}",
            model.dim()
        )));
    }
    let rows: Vec<Vec<f64>> = ds
        .of_split(Split::Train)
        .filter(|e| e.label == QueryLabel::Id)
        .map(|e| e.sentence.clone())
        .collect();
    if rows.is_empty() {
        return Err(Error::contract("no ID training queries to calibrate on"));
    }
    let ll = model.flow.log_likelihood_batch(&Mat::from_rows(&rows)?)?;
    let cal = BoundaryCalibration::from_logliks(&ll, cfg.alpha, cfg.delta, cfg.h_id)?;
    model.calibration = cal;
    Ok(cal)
}
