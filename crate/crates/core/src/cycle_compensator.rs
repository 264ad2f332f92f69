//! Intermediate-flow compensation with a forward/backward warp cycle.
//!
//! Bidirectional flows between two frames are blended into four flows
//! through an intermediate time `i`, the start frame is pushed around the
//! cycle `start -> mid -> end -> mid -> start`, and the four flows are
//! refined jointly by minimizing the cycle objective. The refined
//! start-to-mid flow propagates the intermediate frame/label pair.

use alloc::vec::Vec;

use crate::descent::{minimize, Schedule};
use crate::error::{Error, Result};
use crate::flow_estimator::clamp_flow;
use crate::imagecore::{FlowField, Frame, LabelMask};
use crate::losses::{cycle_loss_with_grad, CycleLossWeights};
use crate::math::sqrt;
use crate::warp::{forward_warp, forward_warp_labels, WarpResult};

const STEP_GROWTH: f64 = 1.25;

/// The four flows through intermediate time `time`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediateFlows {
    pub mid_to_start: FlowField,
    pub mid_to_end: FlowField,
    pub end_to_mid: FlowField,
    pub start_to_mid: FlowField,
    pub time: f64,
}

impl IntermediateFlows {
    fn check(&self) -> Result<()> {
        let f = &self.mid_to_start;
        if !(f.same_dims(&self.mid_to_end) && f.same_dims(&self.end_to_mid) && f.same_dims(&self.start_to_mid)) {
            return Err(Error::invalid("intermediate flows differ in dimensions"));
        }
        Ok(())
    }

    /// All four flows multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        self.map(|f| f.scaled(s))
    }

    fn map(&self, mut f: impl FnMut(&FlowField) -> FlowField) -> Self {
        Self {
            mid_to_start: f(&self.mid_to_start),
            mid_to_end: f(&self.mid_to_end),
            end_to_mid: f(&self.end_to_mid),
            start_to_mid: f(&self.start_to_mid),
            time: self.time,
        }
    }
}

/// Frames of one warp cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleChain {
    pub start: Frame,
    pub end: Frame,
    /// `T(start, start_to_mid)`
    pub mid_forward: WarpResult,
    /// `T(mid_forward, mid_to_end)`
    pub end_predicted: WarpResult,
    /// `T(end_predicted, end_to_mid)`
    pub mid_backward: WarpResult,
    /// `T(mid_backward, mid_to_start)`
    pub start_reconstructed: WarpResult,
}

impl CycleChain {
    pub(crate) fn check_dims(&self) -> Result<()> {
        let s = &self.start;
        let ok = s.same_dims(&self.end)
            && s.same_dims(&self.mid_forward.frame)
            && s.same_dims(&self.end_predicted.frame)
            && s.same_dims(&self.mid_backward.frame)
            && s.same_dims(&self.start_reconstructed.frame);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("cycle chain frames differ in dimensions"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct CompensatorConfig {
    pub iters: usize,
    pub step_size: f64,
    pub convergence_tol: f64,
    pub weights: CycleLossWeights,
    /// Intermediate time in `(0, 1)`.
    pub time: f64,
    pub exclude_holes: bool,
}

impl Default for CompensatorConfig {
    fn default() -> Self {
        Self {
            iters: 300,
            step_size: 0.02,
            convergence_tol: 1e-5,
            weights: CycleLossWeights::default(),
            time: 0.5,
            exclude_holes: true,
        }
    }
}

impl CompensatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::invalid("iters must be at least 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("step_size must be positive"));
        }
        if self.convergence_tol.is_nan() || self.convergence_tol <= 0.0 {
            return Err(Error::invalid("convergence_tol must be positive"));
        }
        if !(self.time > 0.0 && self.time < 1.0) {
            return Err(Error::invalid("intermediate time must lie in (0, 1)"));
        }
        self.weights.validate()
    }
}

/// Blends bidirectional flows into the four intermediate flows:
///
/// ```text
/// mid_to_start = -(1 - i) i F01 + i^2 F10
/// mid_to_end   = (1 - i)^2 F01 - i (1 - i) F10
/// end_to_mid   = F10 - mid_to_start
/// start_to_mid = F01 - mid_to_end
/// ```
///
/// `time` may be any value in `[0, 1]`; refinement requires the open
/// interval.
pub fn approximate_intermediate_flows(f01: &FlowField, f10: &FlowField, time: f64) -> Result<IntermediateFlows> {
    if !f01.same_dims(f10) {
        return Err(Error::invalid("bidirectional flows differ in dimensions"));
    }
    if !(0.0..=1.0).contains(&time) {
        return Err(Error::invalid("intermediate time must lie in [0, 1]"));
    }
    let i = time;
    let mid_to_start = f01.combine(-(1.0 - i) * i, f10, i * i)?;
    let mid_to_end = f01.combine((1.0 - i) * (1.0 - i), f10, -i * (1.0 - i))?;
    let end_to_mid = f10.combine(1.0, &mid_to_start, -1.0)?;
    let start_to_mid = f01.combine(1.0, &mid_to_end, -1.0)?;
    Ok(IntermediateFlows { mid_to_start, mid_to_end, end_to_mid, start_to_mid, time })
}

/// Runs the four warps of the cycle in order.
pub fn build_cycle_chain(start: &Frame, end: &Frame, flows: &IntermediateFlows) -> Result<CycleChain> {
    flows.check()?;
    if !start.same_dims(end) {
        return Err(Error::invalid("cycle endpoints differ in dimensions"));
    }
    let mid_forward = forward_warp(start, &flows.start_to_mid)?;
    let end_predicted = forward_warp(&mid_forward.frame, &flows.mid_to_end)?;
    let mid_backward = forward_warp(&end_predicted.frame, &flows.end_to_mid)?;
    let start_reconstructed = forward_warp(&mid_backward.frame, &flows.mid_to_start)?;
    Ok(CycleChain {
        start: start.clone(),
        end: end.clone(),
        mid_forward,
        end_predicted,
        mid_backward,
        start_reconstructed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub flows: IntermediateFlows,
    /// Cycle loss after every accepted step, starting with the initial loss.
    pub loss_trace: Vec<f64>,
}

/// Jointly refines the four flows by adaptive-step gradient descent on the
/// cycle objective. The returned trace is non-increasing.
pub fn refine_flows(
    start: &Frame,
    end: &Frame,
    init: &IntermediateFlows,
    cfg: &CompensatorConfig,
) -> Result<Refinement> {
    cfg.validate()?;
    init.check()?;
    if !init.start_to_mid.matches_raster(start.raster()) || !start.same_dims(end) {
        return Err(Error::invalid("frames and flows differ in dimensions"));
    }
    let pixels = (start.height() * start.width()) as f64;
    let limit = sqrt((start.height() * start.height() + start.width() * start.width()) as f64);
    let schedule = Schedule {
        max_evals: cfg.iters,
        step: cfg.step_size,
        decay: 0.5,
        growth: STEP_GROWTH,
        tol: cfg.convergence_tol,
    };
    let out = minimize(
        init.clone(),
        schedule,
        |flows: &IntermediateFlows| {
            let chain = build_cycle_chain(start, end, flows)?;
            cycle_loss_with_grad(&chain, flows, &cfg.weights, cfg.exclude_holes)
        },
        |flows, grad, step| {
            let k = -step * pixels;
            let upd = |f: &FlowField, g: &FlowField| {
                let mut n = f.combine(1.0, g, k).expect("same dims");
                clamp_flow(&mut n, limit);
                n
            };
            IntermediateFlows {
                mid_to_start: upd(&flows.mid_to_start, &grad.mid_to_start),
                mid_to_end: upd(&flows.mid_to_end, &grad.mid_to_end),
                end_to_mid: upd(&flows.end_to_mid, &grad.end_to_mid),
                start_to_mid: upd(&flows.start_to_mid, &grad.start_to_mid),
                time: flows.time,
            }
        },
        |iteration| Error::RefinementDiverged { iteration },
    )?;
    Ok(Refinement { flows: out.params, loss_trace: out.trace })
}

/// Propagates the start pair to the intermediate time with the single
/// start-to-mid flow, so frame and label move together.
pub fn interpolate_pair(
    start: &Frame,
    start_label: &LabelMask,
    flows: &IntermediateFlows,
    num_classes: usize,
) -> Result<(Frame, LabelMask)> {
    if !flows.start_to_mid.matches_raster(start.raster()) {
        return Err(Error::invalid("frame and flow differ in dimensions"));
    }
    if start_label.height() != start.height() || start_label.width() != start.width() {
        return Err(Error::invalid("frame and label differ in dimensions"));
    }
    let frame = forward_warp(start, &flows.start_to_mid)?.frame;
    let label = forward_warp_labels(start_label, &flows.start_to_mid, num_classes)?;
    Ok((frame, label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::Raster;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (*seed >> 11) as f64 / (1u64 << 53) as f64
    }

    fn random_flow(h: usize, w: usize, seed: &mut u64) -> FlowField {
        FlowField::from_fn(h, w, |_, _| (lcg(seed) * 6.0 - 3.0, lcg(seed) * 6.0 - 3.0))
    }

    #[test]
    fn endpoint_identities() {
        let mut s = 1;
        let f01 = random_flow(6, 6, &mut s);
        let f10 = random_flow(6, 6, &mut s);
        let at0 = approximate_intermediate_flows(&f01, &f10, 0.0).unwrap();
        assert!(at0.mid_to_start.max_abs() <= 1e-12);
        assert!(at0.start_to_mid.max_abs() <= 1e-12);
        let at1 = approximate_intermediate_flows(&f01, &f10, 1.0).unwrap();
        assert!(at1.end_to_mid.max_abs() <= 1e-12);
        assert_eq!(at1.mid_to_start, f10);
    }

    #[test]
    fn opposite_constant_flows_at_midpoint() {
        let c = (2.0, -1.0);
        let f01 = FlowField::constant(4, 4, c.0, c.1);
        let f10 = FlowField::constant(4, 4, -c.0, -c.1);
        let m = approximate_intermediate_flows(&f01, &f10, 0.5).unwrap();
        assert!(m.start_to_mid.u().iter().all(|&u| u == 0.5 * c.0));
        assert!(m.mid_to_end.v().iter().all(|&v| v == 0.5 * c.1));
        assert!(m.mid_to_start.u().iter().all(|&u| u == -0.5 * c.0));
    }

    #[test]
    fn zero_flow_chain_is_identity() {
        let mut s = 4;
        let f = Frame::from_raster(Raster::from_fn(5, 5, 1, |_, _, _| lcg(&mut s))).unwrap();
        let z = FlowField::zeros(5, 5);
        let flows = approximate_intermediate_flows(&z, &z, 0.5).unwrap();
        let chain = build_cycle_chain(&f, &f, &flows).unwrap();
        assert_eq!(chain.mid_forward.frame, f);
        assert_eq!(chain.start_reconstructed.frame, f);
    }

    #[test]
    fn chain_stages_recompose() {
        let mut s = 9;
        let a = Frame::from_raster(Raster::from_fn(6, 6, 1, |_, _, _| lcg(&mut s))).unwrap();
        let b = Frame::from_raster(Raster::from_fn(6, 6, 1, |_, _, _| lcg(&mut s))).unwrap();
        let flows = approximate_intermediate_flows(&random_flow(6, 6, &mut s), &random_flow(6, 6, &mut s), 0.3).unwrap();
        let chain = build_cycle_chain(&a, &b, &flows).unwrap();
        assert_eq!(chain.mid_forward, forward_warp(&a, &flows.start_to_mid).unwrap());
        assert_eq!(chain.end_predicted, forward_warp(&chain.mid_forward.frame, &flows.mid_to_end).unwrap());
        assert_eq!(chain.mid_backward, forward_warp(&chain.end_predicted.frame, &flows.end_to_mid).unwrap());
        assert_eq!(
            chain.start_reconstructed,
            forward_warp(&chain.mid_backward.frame, &flows.mid_to_start).unwrap()
        );
    }

    #[test]
    fn static_scene_is_a_fixed_point() {
        let mut s = 12;
        let f = Frame::from_raster(Raster::from_fn(8, 8, 1, |_, _, _| lcg(&mut s))).unwrap();
        let z = FlowField::zeros(8, 8);
        let init = approximate_intermediate_flows(&z, &z, 0.5).unwrap();
        let r = refine_flows(&f, &f, &init, &CompensatorConfig::default()).unwrap();
        assert_eq!(r.loss_trace, alloc::vec![0.0]);
        assert_eq!(r.flows, init);
    }

    #[test]
    fn interpolate_zero_flow_is_identity() {
        let f = Frame::constant(4, 4, 1, 0.25).unwrap();
        let l = LabelMask::from_fn(4, 4, |x, _| u8::from(x > 1));
        let z = FlowField::zeros(4, 4);
        let flows = approximate_intermediate_flows(&z, &z, 0.5).unwrap();
        assert_eq!(interpolate_pair(&f, &l, &flows, 2).unwrap(), (f, l));
    }

    #[test]
    fn refine_config_rejects_endpoint_time() {
        let cfg = CompensatorConfig { time: 1.0, ..CompensatorConfig::default() };
        assert!(cfg.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn blend_is_linear(
                seed in any::<u64>(), scale in -3.0f64..3.0, i in 0.0f64..=1.0
            ) {
                let mut s = seed;
                let f01 = random_flow(4, 5, &mut s);
                let f10 = random_flow(4, 5, &mut s);
                let base = approximate_intermediate_flows(&f01, &f10, i).unwrap();
                let scaled = approximate_intermediate_flows(&f01.scaled(scale), &f10.scaled(scale), i).unwrap();
                let expect = base.scaled(scale);
                for (a, b) in [
                    (&scaled.mid_to_start, &expect.mid_to_start),
                    (&scaled.mid_to_end, &expect.mid_to_end),
                    (&scaled.end_to_mid, &expect.end_to_mid),
                    (&scaled.start_to_mid, &expect.start_to_mid),
                ] {
                    for (p, q) in a.u().iter().chain(a.v()).zip(b.u().iter().chain(b.v())) {
                        prop_assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()));
                    }
                }
            }
        }
    }
}
