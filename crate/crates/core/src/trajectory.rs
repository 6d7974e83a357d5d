use serde::{Deserialize, Serialize};

use crate::backbone::TokenMatrix;
use crate::stepcache::ModalityPartition;

/// What a run did at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepDecision {
    /// Backbone evaluated on every token.
    FullEval,
    /// Structure-stage prediction `distance` steps past the last anchor.
    Extrapolate(usize),
    /// Extrapolation requested before two anchors existed; the anchor was held.
    ZeroOrderHold(usize),
    /// Refinement-stage skip: `v = x + Δ_anchor`.
    TangentReuse,
    /// Backbone evaluated on the `active` carved tokens only.
    CarvedEval { active: usize },
}

impl StepDecision {
    pub fn runs_backbone(self) -> bool {
        matches!(self, StepDecision::FullEval | StepDecision::CarvedEval { .. })
    }
}

/// Saliency snapshot taken at a carved evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CarveEvent {
    pub step: usize,
    pub importance: Vec<f64>,
    pub active: Vec<usize>,
}

/// Per-step inputs and outputs of one denoising run.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    /// `inputs[p]` is the latent fed to step `p`.
    pub inputs: Vec<TokenMatrix>,
    /// `outputs[p]` is the (computed or predicted) output of step `p`.
    pub outputs: Vec<TokenMatrix>,
    /// Latent after the last sampler update.
    pub final_latent: TokenMatrix,
    pub partition: Option<ModalityPartition>,
    pub decisions: Vec<StepDecision>,
    pub anchor_steps: Vec<usize>,
    /// Tokens pushed through the backbone at each step.
    pub evaluated_tokens: Vec<usize>,
    pub carve_events: Vec<CarveEvent>,
}

impl TrajectoryRecord {
    pub fn total_steps(&self) -> usize {
        self.outputs.len()
    }

    pub fn token_count(&self) -> usize {
        self.final_latent.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.final_latent.ncols()
    }
}

/// Compute counters of a run and, once compared against an oracle, its error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub total_steps: usize,
    pub full_eval_count: usize,
    /// Σ over backbone calls of the number of tokens evaluated.
    pub token_evals: u64,
    /// `token_evals * feature_dim²`.
    pub flops_proxy: f64,
    /// Steps that fell back to holding the anchor (structure stage only).
    pub fallback_steps: usize,
    /// Relative Frobenius deviation of each step's output; empty until compared.
    pub per_step_error: Vec<f64>,
    /// Relative Frobenius deviation of the final latent.
    pub final_error: f64,
    /// Relative deviation of the final latent restricted to layout tokens.
    pub layout_drift: f64,
}

/// Per-token cost constant of the FLOPs proxy.
pub fn token_cost(feature_dim: usize) -> f64 {
    (feature_dim * feature_dim) as f64
}

impl RunMetrics {
    /// Counters only; error fields stay zero until [`crate::sim::compare_runs`].
    pub fn from_record(record: &TrajectoryRecord) -> Self {
        let token_evals: u64 = record.evaluated_tokens.iter().map(|&n| n as u64).sum();
        Self {
            total_steps: record.total_steps(),
            full_eval_count: record.decisions.iter().filter(|d| d.runs_backbone()).count(),
            token_evals,
            flops_proxy: token_evals as f64 * token_cost(record.feature_dim()),
            fallback_steps: record
                .decisions
                .iter()
                .filter(|d| matches!(d, StepDecision::ZeroOrderHold(_)))
                .count(),
            per_step_error: Vec::new(),
            final_error: 0.0,
            layout_drift: 0.0,
        }
    }
}
