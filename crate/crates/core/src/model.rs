//! A trained model: flow, calibrated boundary, cross-modal matrices and the
//! proposal head, plus single-query inference.

use serde::{Deserialize, Serialize};

use crate::crossmodal::{attentive_pool, fuse_frames, CrossmodalParams, Matrix};
use crate::data::EpisodeSample;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::ood_boundary::{BoundaryCalibration, QueryLabel};
use crate::retrieval::{nms_select, score_proposals, Proposal, ProposalHead};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub flow: FlowModel,
    pub calibration: BoundaryCalibration,
    pub crossmodal: CrossmodalParams,
    pub head: ProposalHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedMoment {
    pub t_s: f64,
    pub t_e: f64,
    pub score: f64,
}

/// One JSON-lines record of inference output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query_id: u32,
    pub verdict: QueryLabel,
    pub loglik: f64,
    /// Top moments after NMS, best first; empty for OOD verdicts.
    pub moments: Vec<PredictedMoment>,
}

impl Model {
    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.crossmodal.dim() != d || self.head.dim() != d {
            return Err(Error::shape(format!(
                "component widths disagree: flow {d}, cross-modal {}, head {}",
                self.crossmodal.dim(),
                self.head.dim()
            )));
        }
        self.calibration.validate()
    }

    pub fn check_episode(&self, ep: &EpisodeSample) -> Result<()> {
        if ep.dim() != self.dim() {
            return Err(Error::contract(format!(
                "query {} has {}-dim features, model expects {}",
                ep.query_id,
                ep.dim(),
                self.dim()
            )));
        }
        ep.validate_features()
    }

    /// Scored, regressed proposals for an episode, before NMS.
    pub fn score(&self, ep: &EpisodeSample, props: &[Proposal]) -> Result<Vec<Proposal>> {
        self.check_episode(ep)?;
        let (q, _) = attentive_pool(&ep.words, self.crossmodal.m(Matrix::Mq))?;
        let fused = fuse_frames(&ep.video, &ep.words, &q, &self.crossmodal)?;
        score_proposals(&fused, props, &self.head)
    }

    pub fn predict(
        &self,
        ep: &EpisodeSample,
        props: &[Proposal],
        nms_n: usize,
        nms_iou: f64,
    ) -> Result<Prediction> {
        self.check_episode(ep)?;
        let loglik = self.flow.log_likelihood(&ep.sentence)?;
        if !loglik.is_finite() {
            return Err(Error::numeric(format!(
                "query {}: non-finite log-likelihood",
                ep.query_id
            )));
        }
        let verdict = self
            .calibration
            .classify(self.calibration.normalize(loglik));
        let moments = match verdict {
            QueryLabel::Ood => Vec::new(),
            QueryLabel::Id => nms_select(&self.score(ep, props)?, nms_n, nms_iou)?
                .iter()
                .map(|p| PredictedMoment {
                    t_s: p.reg_start,
                    t_e: p.reg_end,
                    score: p.score,
                })
                .collect(),
        };
        Ok(Prediction {
            query_id: ep.query_id,
            verdict,
            loglik,
            moments,
        })
    }
}
