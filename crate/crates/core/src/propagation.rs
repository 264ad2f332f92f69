//! Joint frame/label propagation and training-set rearrangement.
//!
//! A [`SparseSequence`] carries labels on every `(h + 1)`-th frame. Each
//! unlabeled frame is reached from its nearest labeled anchor by chaining
//! flows estimated between consecutive raw frames; every step warps the
//! previously propagated frame and label with the same flow, so the pair
//! stays aligned even when the flow is wrong. Between every two consecutive
//! elements of the filled-in sequence one compensated midpoint pair is
//! interpolated.
//!
//! The work splits into independent units ([`plan_propagation`],
//! [`run_propagation`], [`compensate_between`]) so callers can schedule them
//! in parallel; [`rearrange_dataset`] runs them in order.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::cycle_compensator::{approximate_intermediate_flows, interpolate_pair, refine_flows, CompensatorConfig};
use crate::error::{Error, Result};
use crate::flow_estimator::{estimate_bidirectional, estimate_flow, EstimatorConfig};
use crate::imagecore::{FlowField, Frame, LabelMask};
use crate::warp::{forward_warp, forward_warp_labels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn sign(self) -> i64 {
        match self {
            Direction::Forward => 1,
            Direction::Backward => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Provenance {
    Labeled,
    Propagated,
    Compensated,
}

/// Frames with labels at indices `0, h + 1, 2(h + 1), ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSequence {
    frames: Vec<Frame>,
    labels: BTreeMap<usize, LabelMask>,
    interval: usize,
    num_classes: usize,
}

impl SparseSequence {
    pub fn new(
        frames: Vec<Frame>,
        labels: BTreeMap<usize, LabelMask>,
        interval: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::invalid("sequence has no frames"))?;
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::invalid("num_classes must lie in 1..=256"));
        }
        if frames.iter().any(|f| !f.same_dims(first)) {
            return Err(Error::invalid("frames differ in dimensions"));
        }
        let expected: Vec<usize> = (0..frames.len()).step_by(interval + 1).collect();
        if !labels.keys().copied().eq(expected.iter().copied()) {
            return Err(Error::invalid("labeled indices must be exactly the multiples of interval + 1"));
        }
        for mask in labels.values() {
            if mask.height() != first.height() || mask.width() != first.width() {
                return Err(Error::invalid("label and frame differ in dimensions"));
            }
            mask.validate(num_classes)?;
        }
        Ok(Self { frames, labels, interval, num_classes })
    }

    /// Labels every frame where the stride rule asks for one, taking the
    /// masks from `all_labels`.
    pub fn from_dense(frames: Vec<Frame>, all_labels: &[LabelMask], interval: usize, num_classes: usize) -> Result<Self> {
        if all_labels.len() != frames.len() {
            return Err(Error::invalid("need one label per frame"));
        }
        let labels = (0..frames.len()).step_by(interval + 1).map(|t| (t, all_labels[t].clone())).collect();
        Self::new(frames, labels, interval, num_classes)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn labels(&self) -> &BTreeMap<usize, LabelMask> {
        &self.labels
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `N`, the number of labeled frames.
    pub fn num_labeled(&self) -> usize {
        self.labels.len()
    }

    /// `M`, the number of unlabeled frames.
    pub fn num_unlabeled(&self) -> usize {
        self.frames.len() - self.labels.len()
    }

    /// Nearest labeled anchor of `index` (earlier on ties) and the signed
    /// step from it.
    pub fn anchor_of(&self, index: usize) -> (usize, i64) {
        let stride = self.interval + 1;
        let prev = index / stride * stride;
        let next = prev + stride;
        if next < self.len() && next - index < index - prev {
            (next, index as i64 - next as i64)
        } else {
            (prev, (index - prev) as i64)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedPair {
    pub frame: Frame,
    pub label: LabelMask,
    /// Index of the frame the pair was derived from.
    pub source_index: usize,
    /// Nominal temporal position; half-integers for compensated pairs.
    pub target_time: f64,
    /// Signed number of propagation steps from the source.
    pub step: i32,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    /// Raw labeled pairs (`D_L`).
    pub labeled: Vec<PropagatedPair>,
    /// Propagated pairs for every unlabeled index (`D_R`), in index order.
    pub relabeled: Vec<PropagatedPair>,
    /// Midpoint pairs between consecutive elements (`D_C`), in time order.
    pub compensated: Vec<PropagatedPair>,
}

impl TrainingSet {
    /// `D_L` and `D_R` merged in temporal order.
    pub fn timeline(&self) -> Vec<&PropagatedPair> {
        let mut all: Vec<&PropagatedPair> = self.labeled.iter().chain(&self.relabeled).collect();
        all.sort_by(|a, b| a.target_time.total_cmp(&b.target_time));
        all
    }
}

/// Warps frame and label with the same flow.
pub fn joint_propagate(
    anchor_frame: &Frame,
    anchor_label: &LabelMask,
    flow: &FlowField,
    num_classes: usize,
) -> Result<(Frame, LabelMask)> {
    if anchor_label.height() != anchor_frame.height() || anchor_label.width() != anchor_frame.width() {
        return Err(Error::invalid("frame and label differ in dimensions"));
    }
    let frame = forward_warp(anchor_frame, flow)?.frame;
    let label = forward_warp_labels(anchor_label, flow, num_classes)?;
    Ok((frame, label))
}

/// Chains `k_max` propagation steps from a labeled anchor. Step `j` warps
/// the pair from step `j - 1` with the flow estimated between the raw frames
/// at `anchor ± (j - 1)` and `anchor ± j`.
pub fn multistep_propagate(
    seq: &SparseSequence,
    anchor_index: usize,
    k_max: usize,
    direction: Direction,
    cfg: &EstimatorConfig,
) -> Result<Vec<PropagatedPair>> {
    let label = seq
        .labels
        .get(&anchor_index)
        .ok_or_else(|| Error::invalid("propagation anchor is not labeled"))?;
    let sign = direction.sign();
    let last = anchor_index as i64 + sign * k_max as i64;
    if last < 0 || last >= seq.len() as i64 {
        return Err(Error::invalid("propagation runs past the sequence bounds"));
    }
    let mut frame = seq.frames[anchor_index].clone();
    let mut label = label.clone();
    let mut out = Vec::with_capacity(k_max);
    for j in 1..=k_max as i64 {
        let from = (anchor_index as i64 + sign * (j - 1)) as usize;
        let to = (anchor_index as i64 + sign * j) as usize;
        let flow = estimate_flow(&seq.frames[from], &seq.frames[to], cfg)?.flow;
        (frame, label) = joint_propagate(&frame, &label, &flow, seq.num_classes)?;
        out.push(PropagatedPair {
            frame: frame.clone(),
            label: label.clone(),
            source_index: anchor_index,
            target_time: to as f64,
            step: (sign * j) as i32,
            provenance: Provenance::Propagated,
        });
    }
    Ok(out)
}

/// One chain of propagation steps from a single anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PropagationJob {
    pub anchor: usize,
    pub direction: Direction,
    pub steps: usize,
}

/// Propagation chains that cover every unlabeled index from its nearest
/// anchor, in anchor order with forward before backward. Fails with
/// [`Error::CoverageGap`] when some index is more than `k_max` steps away.
pub fn plan_propagation(seq: &SparseSequence, k_max: usize) -> Result<Vec<PropagationJob>> {
    let mut reach: BTreeMap<(usize, bool), usize> = BTreeMap::new();
    for t in (0..seq.len()).filter(|t| !seq.labels.contains_key(t)) {
        let (anchor, step) = seq.anchor_of(t);
        let dist = step.unsigned_abs() as usize;
        if dist > k_max {
            return Err(Error::CoverageGap { index: t, max_steps: k_max });
        }
        let e = reach.entry((anchor, step < 0)).or_insert(0);
        *e = (*e).max(dist);
    }
    Ok(reach
        .into_iter()
        .map(|((anchor, backward), steps)| PropagationJob {
            anchor,
            direction: if backward { Direction::Backward } else { Direction::Forward },
            steps,
        })
        .collect())
}

/// Runs one job; failures name the frame range involved.
pub fn run_propagation(seq: &SparseSequence, job: &PropagationJob, cfg: &EstimatorConfig) -> Result<Vec<PropagatedPair>> {
    let (from, to) = match job.direction {
        Direction::Forward => (job.anchor, job.anchor + job.steps),
        Direction::Backward => (job.anchor - job.steps, job.anchor),
    };
    multistep_propagate(seq, job.anchor, job.steps, job.direction, cfg).map_err(|e| e.in_gap(from, to))
}

/// Splits job outputs into `D_L` and `D_R`, keeping for each unlabeled
/// index the pair that came from its assigned anchor.
pub fn assemble(seq: &SparseSequence, outputs: Vec<Vec<PropagatedPair>>) -> Result<(Vec<PropagatedPair>, Vec<PropagatedPair>)> {
    let labeled = seq
        .labels
        .iter()
        .map(|(&t, mask)| PropagatedPair {
            frame: seq.frames[t].clone(),
            label: mask.clone(),
            source_index: t,
            target_time: t as f64,
            step: 0,
            provenance: Provenance::Labeled,
        })
        .collect();
    let mut by_index: BTreeMap<usize, PropagatedPair> = BTreeMap::new();
    for pair in outputs.into_iter().flatten() {
        let t = pair.target_time as usize;
        let (anchor, step) = seq.anchor_of(t);
        if pair.source_index == anchor && i64::from(pair.step) == step {
            by_index.insert(t, pair);
        }
    }
    let relabeled: Vec<PropagatedPair> = by_index.into_values().collect();
    if relabeled.len() != seq.num_unlabeled() {
        return Err(Error::invalid("propagation outputs do not cover every unlabeled frame"));
    }
    Ok((labeled, relabeled))
}

/// Compensated midpoint pair between two consecutive elements at times
/// `index` and `index + 1`, propagated from the earlier one.
pub fn compensate_between(
    earlier: &PropagatedPair,
    later: &PropagatedPair,
    num_classes: usize,
    cfg: &EstimatorConfig,
    ccfg: &CompensatorConfig,
) -> Result<PropagatedPair> {
    let index = earlier.target_time as usize;
    let run = || -> Result<PropagatedPair> {
        let (f01, f10) = estimate_bidirectional(&earlier.frame, &later.frame, cfg)?;
        let init = approximate_intermediate_flows(&f01, &f10, ccfg.time)?;
        let refined = refine_flows(&earlier.frame, &later.frame, &init, ccfg)?;
        let (frame, label) = interpolate_pair(&earlier.frame, &earlier.label, &refined.flows, num_classes)?;
        Ok(PropagatedPair {
            frame,
            label,
            source_index: index,
            target_time: earlier.target_time + ccfg.time,
            step: 0,
            provenance: Provenance::Compensated,
        })
    };
    run().map_err(|e| e.in_gap(index, index + 1))
}

/// `rearrange_dataset` with propagation chains limited to `k_max` steps.
pub fn rearrange_dataset_with_limit(
    seq: &SparseSequence,
    cfg: &EstimatorConfig,
    ccfg: &CompensatorConfig,
    k_max: usize,
) -> Result<TrainingSet> {
    cfg.validate()?;
    ccfg.validate()?;
    let jobs = plan_propagation(seq, k_max)?;
    let outputs = jobs.iter().map(|job| run_propagation(seq, job, cfg)).collect::<Result<Vec<_>>>()?;
    let (labeled, relabeled) = assemble(seq, outputs)?;
    let mut set = TrainingSet { labeled, relabeled, compensated: Vec::new() };
    let compensated = {
        let timeline = set.timeline();
        timeline
            .windows(2)
            .map(|w| compensate_between(w[0], w[1], seq.num_classes, cfg, ccfg))
            .collect::<Result<Vec<_>>>()?
    };
    set.compensated = compensated;
    Ok(set)
}

/// Builds `D_L`, `D_R` (nearest-anchor propagation, at most `h` steps) and
/// `D_C` (one midpoint between each consecutive pair of the filled-in
/// sequence).
pub fn rearrange_dataset(seq: &SparseSequence, cfg: &EstimatorConfig, ccfg: &CompensatorConfig) -> Result<TrainingSet> {
    rearrange_dataset_with_limit(seq, cfg, ccfg, seq.interval)
}
