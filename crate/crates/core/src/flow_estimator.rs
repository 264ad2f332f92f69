//! Coarse-to-fine variational flow estimation.
//!
//! The flow from `src` to `dst` is the minimizer of the predictor objective
//! `l1 * L1 + perceptual * Lp + smoothness * Ls` evaluated on
//! `forward_warp(src, flow)` against `dst`. Optimization starts from a zero
//! flow at the coarsest box-pyramid level, runs adaptive-step gradient
//! descent at each level and carries the result to the next finer level
//! with [`resize_flow`].

use alloc::vec::Vec;

use crate::descent::{minimize, Schedule};
use crate::error::{Error, Result};
use crate::imagecore::{downsample, raster_gradient, raster_gradient_adjoint, resize_flow, FlowField, Frame, Raster};
use crate::losses::{predictor_loss_with_grad, smoothness_loss, PredictorLossWeights};
use crate::math::sqrt;

/// Step multiplier after an accepted descent step.
const STEP_GROWTH: f64 = 1.25;

/// Smallest side length a pyramid level may have while the structural term
/// is active.
const MIN_LEVEL_SIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct EstimatorConfig {
    pub pyramid_levels: usize,
    pub iters_per_level: usize,
    /// Initial step, applied to the sum-reduced gradient.
    pub step_size: f64,
    /// Step multiplier after a step that does not lower the loss.
    pub step_decay: f64,
    pub convergence_tol: f64,
    pub weights: PredictorLossWeights,
    /// Leave warp holes out of the photometric terms.
    pub exclude_holes: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 4,
            iters_per_level: 200,
            step_size: 0.05,
            step_decay: 0.5,
            convergence_tol: 1e-5,
            weights: PredictorLossWeights::default(),
            exclude_holes: true,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0 {
            return Err(Error::invalid("pyramid_levels must be at least 1"));
        }
        if self.iters_per_level == 0 {
            return Err(Error::invalid("iters_per_level must be at least 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("step_size must be positive"));
        }
        if !(self.step_decay > 0.0 && self.step_decay < 1.0) {
            return Err(Error::invalid("step_decay must lie in (0, 1)"));
        }
        if self.convergence_tol.is_nan() || self.convergence_tol <= 0.0 {
            return Err(Error::invalid("convergence_tol must be positive"));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowEstimate {
    pub flow: FlowField,
    /// Predictor loss of `flow` at full resolution.
    pub final_loss: f64,
    /// Accepted-step losses per pyramid level, coarsest first.
    pub level_traces: Vec<Vec<f64>>,
}

/// Number of pyramid levels actually used for a `height x width` frame.
pub fn effective_levels(height: usize, width: usize, cfg: &EstimatorConfig) -> usize {
    let min_side = if cfg.weights.perceptual > 0.0 { MIN_LEVEL_SIDE } else { 2 };
    let mut levels = 1;
    while levels < cfg.pyramid_levels {
        let factor = 1usize << levels;
        if height.div_ceil(factor) < min_side || width.div_ceil(factor) < min_side {
            break;
        }
        levels += 1;
    }
    levels
}

/// Dual projected-gradient iterations for the smoothness proximal map.
const PROX_ITERS: usize = 40;

/// Upper bound on the squared operator norm of `raster_gradient` (both
/// axes, one-sided rows at the borders).
const GRADIENT_NORM_SQ: f64 = 6.0;

/// Rounds of whole-field offset trials per level.
const SHIFT_ROUNDS: usize = 3;

const SHIFTS: [(f64, f64); 12] = [
    (1.0, 0.0),
    (-1.0, 0.0),
    (0.0, 1.0),
    (0.0, -1.0),
    (1.0, 1.0),
    (1.0, -1.0),
    (-1.0, 1.0),
    (-1.0, -1.0),
    (0.5, 0.0),
    (-0.5, 0.0),
    (0.0, 0.5),
    (0.0, -0.5),
];

/// Proximal gradient descent on one pyramid level: a gradient step on the
/// photometric terms followed by the proximal map of the L1 flow-smoothness
/// term. Plain gradient steps stall at the zero start, where the
/// smoothness term is non-differentiable in every direction.
///
/// The bilinear splat blurs the warped frame between integer displacements,
/// which leaves local minima roughly one pixel apart. After each descent a
/// few whole-field offsets of half and one pixel are tried, and the best is
/// kept (and descended from) if it lowers the loss.
fn descend_level(
    src: &Frame,
    dst: &Frame,
    init: FlowField,
    cfg: &EstimatorConfig,
    level: usize,
) -> Result<(FlowField, Vec<f64>)> {
    let (h, w) = (src.height(), src.width());
    let pixels = (h * w) as f64;
    let limit = sqrt((h * h + w * w) as f64);
    let lambda_s = cfg.weights.smoothness;
    let photometric = PredictorLossWeights { smoothness: 0.0, ..cfg.weights };
    let schedule = Schedule {
        max_evals: cfg.iters_per_level,
        step: cfg.step_size,
        decay: cfg.step_decay,
        growth: STEP_GROWTH,
        tol: cfg.convergence_tol,
    };
    let eval = |flow: &FlowField| -> Result<(f64, FlowField)> {
        let (p, grad) = predictor_loss_with_grad(src, dst, flow, &photometric, cfg.exclude_holes)?;
        Ok((p + lambda_s * smoothness_loss(flow)?, grad))
    };
    let mut flow = init;
    let mut trace: Vec<f64> = Vec::new();
    for round in 0..=SHIFT_ROUNDS {
        let offset = round * (cfg.iters_per_level + SHIFTS.len());
        let out = minimize(
            flow,
            schedule,
            eval,
            |f, grad, step| {
                let moved = f.combine(1.0, grad, -step * pixels).expect("same dims");
                let mut next = if lambda_s > 0.0 { prox_smoothness(&moved, step * lambda_s) } else { moved };
                clamp_flow(&mut next, limit);
                next
            },
            |iteration| Error::EstimationDiverged { level, iteration: offset + iteration },
        )?;
        trace.extend_from_slice(&out.trace[usize::from(round > 0)..]);
        flow = out.params;
        let current = *trace.last().expect("non-empty trace");
        if round == SHIFT_ROUNDS || current == 0.0 {
            break;
        }
        let mut best: Option<(f64, FlowField)> = None;
        for (du, dv) in SHIFTS {
            let mut shifted = flow.combine(1.0, &FlowField::constant(h, w, du, dv), 1.0).expect("same dims");
            clamp_flow(&mut shifted, limit);
            let (loss, _) = eval(&shifted)?;
            if loss < best.as_ref().map_or(current, |b| b.0) {
                best = Some((loss, shifted));
            }
        }
        match best {
            Some((loss, shifted)) => {
                trace.push(loss);
                flow = shifted;
            }
            None => break,
        }
    }
    Ok((flow, trace))
}

/// Approximately solves `argmin_y 0.5 |y - z|^2 + tau |grad y|_1`
/// separately for both flow components, through projected gradient ascent
/// on the dual.
pub(crate) fn prox_smoothness(z: &FlowField, tau: f64) -> FlowField {
    let (h, w) = (z.height(), z.width());
    let theta = 1.0 / (tau * GRADIENT_NORM_SQ);
    let solve = |plane: &[f64]| -> Vec<f64> {
        let zr = Raster::new(h, w, 1, plane.to_vec()).expect("finite plane");
        let mut px = Raster::zeros(h, w, 1);
        let mut py = Raster::zeros(h, w, 1);
        let mut y = zr.clone();
        for _ in 0..PROX_ITERS {
            let (gx, gy) = raster_gradient(&y);
            for (p, g) in px.data_mut().iter_mut().zip(gx.data()) {
                *p = (*p + theta * g).clamp(-1.0, 1.0);
            }
            for (p, g) in py.data_mut().iter_mut().zip(gy.data()) {
                *p = (*p + theta * g).clamp(-1.0, 1.0);
            }
            let adj = raster_gradient_adjoint(&px, &py).expect("same shape");
            for ((o, zi), a) in y.data_mut().iter_mut().zip(zr.data()).zip(adj.data()) {
                *o = zi - tau * a;
            }
        }
        y.into_data()
    };
    FlowField::new(h, w, solve(z.u()), solve(z.v())).expect("same dims")
}

/// Bounds every component by `limit` (the frame diagonal).
pub(crate) fn clamp_flow(flow: &mut FlowField, limit: f64) {
    for x in flow.u_mut().iter_mut() {
        *x = x.clamp(-limit, limit);
    }
    for x in flow.v_mut().iter_mut() {
        *x = x.clamp(-limit, limit);
    }
}

/// Estimates the flow that forward-warps `src` onto `dst`.
pub fn estimate_flow(src: &Frame, dst: &Frame, cfg: &EstimatorConfig) -> Result<FlowEstimate> {
    cfg.validate()?;
    if !src.same_dims(dst) {
        return Err(Error::invalid("source and destination frames differ in dimensions"));
    }
    let (h, w) = (src.height(), src.width());
    let requested_factor = 1usize << (cfg.pyramid_levels - 1);
    if h < requested_factor || w < requested_factor {
        return Err(Error::invalid("frames are too small for the requested pyramid depth"));
    }
    if cfg.weights.perceptual > 0.0 && (h < MIN_LEVEL_SIDE || w < MIN_LEVEL_SIDE) {
        return Err(Error::invalid("frames must be at least 4x4 for the structural term"));
    }
    let levels = effective_levels(h, w, cfg);

    let mut flow: Option<FlowField> = None;
    let mut level_traces = Vec::with_capacity(levels);
    for level in (0..levels).rev() {
        let factor = 1usize << level;
        let (s, d) = if factor == 1 {
            (src.clone(), dst.clone())
        } else {
            (downsample(src, factor)?, downsample(dst, factor)?)
        };
        let init = match flow.take() {
            None => FlowField::zeros(s.height(), s.width()),
            Some(f) => resize_flow(&f, s.height(), s.width())?,
        };
        let (refined, trace) = descend_level(&s, &d, init, cfg, level)?;
        level_traces.push(trace);
        flow = Some(refined);
    }
    let flow = flow.expect("at least one level");
    let final_loss = *level_traces.last().and_then(|t: &Vec<f64>| t.last()).expect("non-empty trace");
    Ok(FlowEstimate { flow, final_loss, level_traces })
}

/// Flows `a -> b` and `b -> a`, estimated independently.
pub fn estimate_bidirectional(a: &Frame, b: &Frame, cfg: &EstimatorConfig) -> Result<(FlowField, FlowField)> {
    let ab = estimate_flow(a, b, cfg)?;
    let ba = estimate_flow(b, a, cfg)?;
    Ok((ab.flow, ba.flow))
}
