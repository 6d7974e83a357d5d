//! Modality-aware step caching for the sparse-structure stage.
//!
//! The backbone runs on a stride-`k` schedule after a short warmup. Between
//! anchors, shape tokens are predicted by first-order extrapolation from the two
//! most recent anchors, and layout tokens by the same extrapolation blended
//! with the last fully computed layout output:
//!
//! ```text
//! grad        = (v_anchor - v_prev_anchor) / distance
//! shape(i)    = v_anchor + i * grad
//! layout(i)   = beta * (v_anchor + i * grad) + (1 - beta) * layout_anchor
//! ```
//!
//! `i` counts steps past the anchor, so predictions continue the trend the two
//! anchors observed and are exact on outputs that are affine in the step index.

use std::collections::HashSet;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::backbone::{check_latent, select_rows, Backbone, TokenMatrix};
use crate::error::{check_same_shape, Error, Result};
use crate::trajectory::{RunMetrics, StepDecision, TrajectoryRecord};

/// Split of the structure-stage tokens into shape and layout rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityPartition {
    shape: Vec<usize>,
    layout: Vec<usize>,
}

impl ModalityPartition {
    pub fn new(shape: Vec<usize>, layout: Vec<usize>, token_count: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(token_count);
        for &i in shape.iter().chain(&layout) {
            if i >= token_count {
                return Err(Error::invalid(format!(
                    "partition index {i} out of range for {token_count} tokens"
                )));
            }
            if !seen.insert(i) {
                return Err(Error::invalid(format!("token {i} assigned twice in partition")));
            }
        }
        if seen.len() != token_count {
            return Err(Error::invalid(format!(
                "partition covers {} of {token_count} tokens",
                seen.len()
            )));
        }
        Ok(Self { shape, layout })
    }

    /// Every token is a shape token.
    pub fn all_shape(token_count: usize) -> Self {
        Self {
            shape: (0..token_count).collect(),
            layout: Vec::new(),
        }
    }

    /// The last `layout_count` rows are layout tokens.
    pub fn trailing_layout(token_count: usize, layout_count: usize) -> Result<Self> {
        if layout_count > token_count {
            return Err(Error::invalid(format!(
                "{layout_count} layout tokens exceed {token_count} tokens"
            )));
        }
        let split = token_count - layout_count;
        Ok(Self {
            shape: (0..split).collect(),
            layout: (split..token_count).collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn layout(&self) -> &[usize] {
        &self.layout
    }

    pub fn token_count(&self) -> usize {
        self.shape.len() + self.layout.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepCacheConfig {
    pub stride_k: usize,
    pub momentum_beta: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Default for StepCacheConfig {
    fn default() -> Self {
        Self {
            stride_k: 3,
            momentum_beta: 0.5,
            warmup_steps: 2,
            total_steps: 25,
        }
    }
}

impl StepCacheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride_k < 1 {
            return Err(Error::invalid("stride_k must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.momentum_beta) {
            return Err(Error::invalid(format!(
                "momentum_beta must be in [0, 1], got {}",
                self.momentum_beta
            )));
        }
        if self.total_steps < 1 {
            return Err(Error::invalid("total_steps must be >= 1"));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::invalid(format!(
                "warmup_steps ({}) must be < total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// `warmup + ceil((total - warmup) / k)`.
    pub fn full_eval_count(&self) -> usize {
        let rest = self.total_steps - self.warmup_steps;
        self.warmup_steps + rest.div_ceil(self.stride_k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsDecision {
    FullEval,
    /// Predict the output this many steps past the last full evaluation.
    Extrapolate(usize),
}

/// Full evaluation for the warmup positions and every `stride_k`-th position
/// after them; everything else extrapolates from the last full evaluation.
pub fn ss_schedule(step_index: usize, config: &StepCacheConfig) -> SsDecision {
    if step_index < config.warmup_steps {
        return SsDecision::FullEval;
    }
    match (step_index - config.warmup_steps) % config.stride_k.max(1) {
        0 => SsDecision::FullEval,
        i => SsDecision::Extrapolate(i),
    }
}

/// Per-step slope between two anchors `distance` steps apart.
pub fn finite_difference(
    v_current: &TokenMatrix,
    v_prev_anchor: &TokenMatrix,
    distance: usize,
) -> Result<TokenMatrix> {
    check_same_shape(v_current.dim(), v_prev_anchor.dim())?;
    if distance == 0 {
        return Err(Error::invalid("anchor distance must be >= 1"));
    }
    Ok((v_current - v_prev_anchor) / distance as f64)
}

pub fn extrapolate_shape(
    v_anchor: &TokenMatrix,
    grad: &TokenMatrix,
    steps_ahead: usize,
) -> Result<TokenMatrix> {
    check_same_shape(v_anchor.dim(), grad.dim())?;
    if steps_ahead == 0 {
        return Err(Error::invalid("steps_ahead must be >= 1"));
    }
    Ok(v_anchor + &(grad * steps_ahead as f64))
}

pub fn extrapolate_layout(
    v_anchor: &TokenMatrix,
    grad: &TokenMatrix,
    steps_ahead: usize,
    layout_anchor: &TokenMatrix,
    beta: f64,
) -> Result<TokenMatrix> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta must be in [0, 1], got {beta}")));
    }
    check_same_shape(v_anchor.dim(), layout_anchor.dim())?;
    let linear = extrapolate_shape(v_anchor, grad, steps_ahead)?;
    Ok(linear * beta + &(layout_anchor * (1.0 - beta)))
}

/// Anchors and gradients carried between structure-stage steps.
#[derive(Debug, Clone)]
pub struct SsCacheState {
    last_anchor_step: usize,
    anchor_output: TokenMatrix,
    prev_anchor: Option<(usize, TokenMatrix)>,
    grad_shape: Option<TokenMatrix>,
    grad_layout: Option<TokenMatrix>,
    layout_anchor: TokenMatrix,
}

impl SsCacheState {
    pub fn new(step: usize, output: TokenMatrix, partition: &ModalityPartition) -> Self {
        let layout_anchor = select_rows(&output, partition.layout());
        Self {
            last_anchor_step: step,
            anchor_output: output,
            prev_anchor: None,
            grad_shape: None,
            grad_layout: None,
            layout_anchor,
        }
    }

    pub fn last_anchor_step(&self) -> usize {
        self.last_anchor_step
    }

    pub fn anchor_output(&self) -> &TokenMatrix {
        &self.anchor_output
    }

    pub fn has_gradient(&self) -> bool {
        self.grad_shape.is_some()
    }

    /// Records a new full evaluation and refreshes the gradients from the two
    /// most recent anchors, dividing by their actual step distance.
    pub fn refresh(
        &mut self,
        step: usize,
        output: TokenMatrix,
        partition: &ModalityPartition,
    ) -> Result<()> {
        if step <= self.last_anchor_step {
            return Err(Error::invalid(format!(
                "anchor step {step} does not advance past {}",
                self.last_anchor_step
            )));
        }
        let distance = step - self.last_anchor_step;
        let shape_now = select_rows(&output, partition.shape());
        let shape_prev = select_rows(&self.anchor_output, partition.shape());
        let layout_now = select_rows(&output, partition.layout());
        let layout_prev = select_rows(&self.anchor_output, partition.layout());
        self.grad_shape = Some(finite_difference(&shape_now, &shape_prev, distance)?);
        self.grad_layout = Some(finite_difference(&layout_now, &layout_prev, distance)?);
        let previous = std::mem::replace(&mut self.anchor_output, output);
        self.prev_anchor = Some((self.last_anchor_step, previous));
        self.last_anchor_step = step;
        self.layout_anchor = layout_now;
        Ok(())
    }

    /// Prediction `steps_ahead` past the anchor, or the held anchor when no
    /// gradient exists yet (second value `false`).
    pub fn predict(
        &self,
        steps_ahead: usize,
        partition: &ModalityPartition,
        beta: f64,
    ) -> Result<(TokenMatrix, bool)> {
        let (Some(grad_shape), Some(grad_layout)) = (&self.grad_shape, &self.grad_layout) else {
            return Ok((self.anchor_output.clone(), false));
        };
        let mut out = self.anchor_output.clone();
        let shape_anchor = select_rows(&self.anchor_output, partition.shape());
        let shape = extrapolate_shape(&shape_anchor, grad_shape, steps_ahead)?;
        scatter_rows(&mut out, partition.shape(), &shape);

        if !partition.layout().is_empty() {
            let layout_base = select_rows(&self.anchor_output, partition.layout());
            let layout = extrapolate_layout(
                &layout_base,
                grad_layout,
                steps_ahead,
                &self.layout_anchor,
                beta,
            )?;
            scatter_rows(&mut out, partition.layout(), &layout);
        }
        Ok((out, true))
    }
}

fn scatter_rows(dst: &mut TokenMatrix, rows: &[usize], src: &TokenMatrix) {
    for (src_row, &dst_row) in src.axis_iter(Axis(0)).zip(rows) {
        dst.row_mut(dst_row).assign(&src_row);
    }
}

/// Runs the structure stage under the stride-`k` schedule.
///
/// The returned metrics carry compute counters only; compare against an oracle
/// run with [`crate::sim::compare_runs`] for errors.
pub fn run_ss_stage<B: Backbone + ?Sized>(
    backbone: &B,
    partition: &ModalityPartition,
    config: &StepCacheConfig,
) -> Result<(TrajectoryRecord, RunMetrics)> {
    config.validate()?;
    let n = backbone.token_count();
    let dim = backbone.feature_dim();
    if partition.token_count() != n {
        return Err(Error::invalid(format!(
            "partition covers {} tokens, backbone has {n}",
            partition.token_count()
        )));
    }

    let steps = config.total_steps;
    let mut x = backbone.initial_latent();
    check_latent(&x, n, dim)?;

    let mut inputs = Vec::with_capacity(steps);
    let mut outputs = Vec::with_capacity(steps);
    let mut decisions = Vec::with_capacity(steps);
    let mut anchor_steps = Vec::new();
    let mut evaluated_tokens = Vec::with_capacity(steps);
    let mut cache: Option<SsCacheState> = None;

    for step in 0..steps {
        let (v, decision) = match (ss_schedule(step, config), cache.as_ref()) {
            (SsDecision::FullEval, _) | (SsDecision::Extrapolate(_), None) => {
                let v = backbone.eval(&x, step)?;
                check_latent(&v, n, dim)?;
                match cache.as_mut() {
                    Some(state) => state.refresh(step, v.clone(), partition)?,
                    None => cache = Some(SsCacheState::new(step, v.clone(), partition)),
                }
                anchor_steps.push(step);
                (v, StepDecision::FullEval)
            }
            (SsDecision::Extrapolate(_), Some(state)) => {
                let ahead = step - state.last_anchor_step();
                let (v, extrapolated) = state.predict(ahead, partition, config.momentum_beta)?;
                let decision = if extrapolated {
                    StepDecision::Extrapolate(ahead)
                } else {
                    StepDecision::ZeroOrderHold(ahead)
                };
                (v, decision)
            }
        };
        evaluated_tokens.push(if decision.runs_backbone() { n } else { 0 });
        let next = backbone.advance(&x, &v, step);
        inputs.push(std::mem::replace(&mut x, next));
        outputs.push(v);
        decisions.push(decision);
    }

    let record = TrajectoryRecord {
        inputs,
        outputs,
        final_latent: x,
        partition: Some(partition.clone()),
        decisions,
        anchor_steps,
        evaluated_tokens,
        carve_events: Vec::new(),
    };
    let metrics = RunMetrics::from_record(&record);
    Ok((record, metrics))
}
