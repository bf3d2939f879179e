//! Calibrated inference: the refuser delta is scaled by how relevant the
//! query is to any unlearned task, so unrelated queries decode exactly as the
//! pretrained model would.

use serde::{Deserialize, Serialize};

use crate::engine::{EngineState, QueryActivations};
use crate::error::{Error, Result};
use crate::numerics::axpy;
use crate::refusal::{mixture_delta, task_relevance, top_k_gate, GateVector};
use crate::world::{mock_decode, pretrained_connect, MockLM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Relevance below this maps to β = 0.
    pub beta_threshold: f64,
    /// Use the [0, 1]-rescaled relevance (otherwise the raw sigmoid value).
    pub use_rescaled_beta: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { beta_threshold: 0.6, use_rescaled_beta: true }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta_threshold) {
            return Err(Error::config("calibration.beta_threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Beta {
    /// Scale applied to the refuser delta.
    pub beta: f64,
    /// Highest relevance over task records, before thresholding.
    pub max_relevance: f64,
    /// Record index (not task index) attaining the maximum.
    pub argmax_task: Option<usize>,
}

/// Maximum relevance of the query against every task record, thresholded.
pub fn query_relevance_beta(state: &EngineState, query: &QueryActivations, cal: &CalibrationConfig) -> Result<Beta> {
    let mut best: Option<(usize, f64)> = None;
    for (i, record) in state.records.iter().enumerate() {
        if record.avg_refined_img.len() != query.refined_img.values.len()
            || record.avg_refined_txt.len() != query.refined_txt.values.len()
        {
            return Err(Error::Registry(format!(
                "record for task {} was averaged under a different concept set",
                record.task_index
            )));
        }
        let rel = task_relevance(
            &query.refined_img.values,
            &query.refined_txt.values,
            &record.avg_refined_img,
            &record.avg_refined_txt,
        )?;
        let value = if cal.use_rescaled_beta { rel.rescaled } else { rel.raw };
        if best.is_none_or(|(_, b)| value > b) {
            best = Some((i, value));
        }
    }
    let Some((idx, max_relevance)) = best else {
        return Ok(Beta { beta: 0.0, max_relevance: 0.0, argmax_task: None });
    };
    let beta = if max_relevance < cal.beta_threshold { 0.0 } else { max_relevance };
    Ok(Beta { beta, max_relevance, argmax_task: Some(idx) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibratedOutput {
    pub class: usize,
    pub logits: Vec<f64>,
    pub beta: Beta,
    /// Refusers the router would engage, whether or not β lets them act.
    pub gate: GateVector,
}

/// Decodes `P x_img + β ΔP(x_img)`. With β = 0 the delta is skipped entirely,
/// so the logits are bit-identical to the pretrained decode.
pub fn forward_with_beta(
    state: &EngineState,
    lm: &MockLM,
    connector: &crate::numerics::Mat,
    query: &QueryActivations,
    x_img: &[f64],
    x_txt: &[f64],
    beta: f64,
) -> Result<(Vec<f64>, usize, GateVector)> {
    let out = state.mixture.router.forward(&query.router_img, &query.router_txt)?;
    let gate = top_k_gate(&out, state.refusal.top_k)?;
    let mut visual = pretrained_connect(x_img, connector)?;
    if beta != 0.0 {
        let delta = mixture_delta(&state.mixture.bank, &gate, x_img)?;
        axpy(&mut visual, beta, &delta);
    }
    let decoded = mock_decode(lm, &visual, x_txt)?;
    Ok((decoded.logits, decoded.class, gate))
}

pub fn calibrated_forward(
    state: &EngineState,
    lm: &MockLM,
    connector: &crate::numerics::Mat,
    x_img: &[f64],
    x_txt: &[f64],
    cal: &CalibrationConfig,
) -> Result<CalibratedOutput> {
    let query = state.query(x_img, x_txt)?;
    let mut beta = query_relevance_beta(state, &query, cal)?;
    if state.flags.calibration {
        beta.beta = 1.0;
    }
    let (logits, class, gate) = forward_with_beta(state, lm, connector, &query, x_img, x_txt, beta.beta)?;
    Ok(CalibratedOutput { class, logits, beta, gate })
}
