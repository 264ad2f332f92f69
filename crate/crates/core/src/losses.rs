//! Photometric, structural and smoothness losses with analytic gradients.
//!
//! Every loss is mean-reduced so that its weight does not depend on the
//! image resolution. The structural ("perceptual") term compares a fixed
//! feature stack: for three box-pyramid levels, the channel-mean intensity
//! and its gradient magnitude.

use alloc::vec::Vec;

use crate::cycle_compensator::{CycleChain, IntermediateFlows};
use crate::error::{Error, Result};
use crate::imagecore::{
    downsample_adjoint, downsample_raster, raster_gradient, raster_gradient_adjoint, FlowField, Frame, Raster,
};
use crate::math::{abs, sign, sqrt};
use crate::warp::{forward_warp_raster, warp_vjp, WarpResult};

/// Weights of the flow-predictor objective.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PredictorLossWeights {
    pub l1: f64,
    pub perceptual: f64,
    pub smoothness: f64,
}

impl Default for PredictorLossWeights {
    fn default() -> Self {
        Self { l1: 0.7, perceptual: 0.2, smoothness: 0.1 }
    }
}

impl PredictorLossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.l1, self.perceptual, self.smoothness].iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::invalid("predictor loss weights must be finite and non-negative"))
        }
    }
}

/// Weights of the cycle objective: L1 on the reconstructed start frame, on
/// the two intermediate estimates and on the predicted end frame, plus the
/// weight of the structural term summed over the same three pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CycleLossWeights {
    pub start: f64,
    pub intermediate: f64,
    pub end: f64,
    pub perceptual: f64,
}

impl Default for CycleLossWeights {
    fn default() -> Self {
        Self { start: 1.0, intermediate: 0.8, end: 2.0, perceptual: 0.01 }
    }
}

impl CycleLossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.start, self.intermediate, self.end, self.perceptual]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
        {
            Ok(())
        } else {
            Err(Error::invalid("cycle loss weights must be finite and non-negative"))
        }
    }
}

fn same_shape(a: &Raster, b: &Raster) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::invalid("loss inputs differ in shape"))
    }
}

pub(crate) fn l1_raster(a: &Raster, b: &Raster) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| abs(x - y)).sum();
    s / a.data().len() as f64
}

/// `d l1 / d a`; the gradient for `b` is its negation.
pub(crate) fn l1_raster_grad(a: &Raster, b: &Raster) -> Raster {
    let inv = 1.0 / a.data().len() as f64;
    let mut g = Raster::zeros(a.height(), a.width(), a.channels());
    for (o, (x, y)) in g.data_mut().iter_mut().zip(a.data().iter().zip(b.data())) {
        *o = sign(x - y) * inv;
    }
    g
}

/// Mean absolute difference over all pixels and channels.
pub fn l1_loss(a: &Frame, b: &Frame) -> Result<f64> {
    same_shape(a.raster(), b.raster())?;
    Ok(l1_raster(a.raster(), b.raster()))
}

/// Gradient of [`l1_loss`] with respect to `a` (zero where `a == b`).
pub fn l1_loss_grad(a: &Frame, b: &Frame) -> Result<Raster> {
    same_shape(a.raster(), b.raster())?;
    Ok(l1_raster_grad(a.raster(), b.raster()))
}

fn flow_planes(flow: &FlowField) -> (Raster, Raster) {
    let (h, w) = (flow.height(), flow.width());
    let u = Raster::from_fn(h, w, 1, |x, y, _| flow.u()[y * w + x]);
    let v = Raster::from_fn(h, w, 1, |x, y, _| flow.v()[y * w + x]);
    (u, v)
}

fn check_smooth_dims(flow: &FlowField) -> Result<()> {
    if flow.height() < 2 || flow.width() < 2 {
        return Err(Error::invalid("smoothness loss needs at least 2x2 pixels"));
    }
    Ok(())
}

/// Mean over pixels of `|du/dx| + |du/dy| + |dv/dx| + |dv/dy|`.
pub fn smoothness_loss(flow: &FlowField) -> Result<f64> {
    check_smooth_dims(flow)?;
    let (u, v) = flow_planes(flow);
    let (ux, uy) = raster_gradient(&u);
    let (vx, vy) = raster_gradient(&v);
    let total: f64 = [&ux, &uy, &vx, &vy]
        .iter()
        .map(|g| g.data().iter().map(|d| abs(*d)).sum::<f64>())
        .sum();
    Ok(total / flow.height() as f64 / flow.width() as f64)
}

pub fn smoothness_loss_grad(flow: &FlowField) -> Result<FlowField> {
    check_smooth_dims(flow)?;
    let (h, w) = (flow.height(), flow.width());
    let inv = 1.0 / (h * w) as f64;
    let (u, v) = flow_planes(flow);
    let signed = |g: &Raster| {
        let mut s = g.clone();
        for d in s.data_mut() {
            *d = sign(*d) * inv;
        }
        s
    };
    let (ux, uy) = raster_gradient(&u);
    let (vx, vy) = raster_gradient(&v);
    let gu = raster_gradient_adjoint(&signed(&ux), &signed(&uy))?;
    let gv = raster_gradient_adjoint(&signed(&vx), &signed(&vy))?;
    FlowField::new(h, w, gu.into_data(), gv.into_data())
}

/// Number of pyramid levels in the structural feature stack.
pub const FEATURE_LEVELS: usize = 3;

struct FeatureLevel {
    intensity: Raster,
    gx: Raster,
    gy: Raster,
    magnitude: Raster,
}

fn feature_levels(r: &Raster) -> Result<Vec<FeatureLevel>> {
    if r.height() < 4 || r.width() < 4 {
        return Err(Error::invalid("structural features need at least 4x4 pixels"));
    }
    let mut levels = Vec::with_capacity(FEATURE_LEVELS);
    let mut intensity = r.channel_mean();
    for level in 0..FEATURE_LEVELS {
        if level > 0 {
            intensity = downsample_raster(&intensity, 2)?;
        }
        let (gx, gy) = raster_gradient(&intensity);
        let mut magnitude = gx.clone();
        for (m, (x, y)) in magnitude.data_mut().iter_mut().zip(gx.data().iter().zip(gy.data())) {
            *m = sqrt(x * x + y * y);
        }
        levels.push(FeatureLevel { intensity: intensity.clone(), gx, gy, magnitude });
    }
    Ok(levels)
}

/// The fixed feature stack `[I0, |grad I0|, I1, |grad I1|, I2, |grad I2|]`,
/// where `I_l` is the channel-mean intensity box-downsampled by `2^l`.
pub fn perceptual_features(frame: &Frame) -> Result<Vec<Raster>> {
    raster_features(frame.raster())
}

pub(crate) fn raster_features(r: &Raster) -> Result<Vec<Raster>> {
    Ok(feature_levels(r)?
        .into_iter()
        .flat_map(|l| [l.intensity, l.magnitude])
        .collect())
}

/// Pulls per-map adjoints back to the input raster.
fn features_adjoint(levels: &[FeatureLevel], adj: &[Raster], height: usize, width: usize, channels: usize) -> Result<Raster> {
    let mut carry: Option<Raster> = None;
    for (l, level) in levels.iter().enumerate().rev() {
        let mut total = adj[2 * l].clone();
        let adj_mag = &adj[2 * l + 1];
        let mut ax = level.gx.clone();
        let mut ay = level.gy.clone();
        for (i, m) in level.magnitude.data().iter().enumerate() {
            let k = if *m > 0.0 { adj_mag.data()[i] / m } else { 0.0 };
            ax.data_mut()[i] *= k;
            ay.data_mut()[i] *= k;
        }
        let from_mag = raster_gradient_adjoint(&ax, &ay)?;
        for (t, f) in total.data_mut().iter_mut().zip(from_mag.data()) {
            *t += f;
        }
        if let Some(coarser) = carry.take() {
            let up = downsample_adjoint(&coarser, level.intensity.height(), level.intensity.width(), 2)?;
            for (t, f) in total.data_mut().iter_mut().zip(up.data()) {
                *t += f;
            }
        }
        carry = Some(total);
    }
    let intensity_adj = carry.expect("at least one level");
    let inv = 1.0 / channels as f64;
    Ok(Raster::from_fn(height, width, channels, |x, y, _| intensity_adj.get(x, y, 0) * inv))
}

/// Structural loss and its gradients with respect to both inputs.
pub(crate) fn perceptual_vjp(a: &Raster, b: &Raster) -> Result<(f64, Raster, Raster)> {
    same_shape(a, b)?;
    let la = feature_levels(a)?;
    let lb = feature_levels(b)?;
    let maps = (2 * FEATURE_LEVELS) as f64;
    let mut loss = 0.0;
    let mut adj_a = Vec::with_capacity(2 * FEATURE_LEVELS);
    let mut adj_b = Vec::with_capacity(2 * FEATURE_LEVELS);
    for (fa, fb) in la.iter().zip(&lb) {
        for (ma, mb) in [(&fa.intensity, &fb.intensity), (&fa.magnitude, &fb.magnitude)] {
            loss += l1_raster(ma, mb) / maps;
            let mut g = l1_raster_grad(ma, mb);
            for d in g.data_mut() {
                *d /= maps;
            }
            let mut gneg = g.clone();
            for d in gneg.data_mut() {
                *d = -*d;
            }
            adj_a.push(g);
            adj_b.push(gneg);
        }
    }
    let (h, w, c) = (a.height(), a.width(), a.channels());
    let ga = features_adjoint(&la, &adj_a, h, w, c)?;
    let gb = features_adjoint(&lb, &adj_b, h, w, c)?;
    Ok((loss, ga, gb))
}

/// Mean L1 distance between the two feature stacks, averaged over maps.
pub fn perceptual_loss(a: &Frame, b: &Frame) -> Result<f64> {
    same_shape(a.raster(), b.raster())?;
    let fa = raster_features(a.raster())?;
    let fb = raster_features(b.raster())?;
    Ok(fa.iter().zip(&fb).map(|(x, y)| l1_raster(x, y)).sum::<f64>() / fa.len() as f64)
}

/// Gradient of [`perceptual_loss`] with respect to `a`.
pub fn perceptual_loss_grad(a: &Frame, b: &Frame) -> Result<Raster> {
    Ok(perceptual_vjp(a.raster(), b.raster())?.1)
}

/// Weighted L1 + structural comparison of one image pair, with gradients
/// for both sides.
pub(crate) struct PairTerm {
    pub value: f64,
    pub grad_a: Raster,
    pub grad_b: Raster,
}

/// Compares `a` against `b`. Pixels flagged in `exclude` are treated as if
/// `a` matched `b` there, so they carry no residual and `a` gets no gradient
/// from them.
pub(crate) fn photometric_pair(
    a: &Raster,
    b: &Raster,
    exclude: Option<&[bool]>,
    l1_weight: f64,
    perceptual_weight: f64,
) -> Result<PairTerm> {
    same_shape(a, b)?;
    let ch = a.channels();
    let masked;
    let a_eff = match exclude {
        Some(mask) if mask.iter().any(|&m| m) => {
            let mut m = a.clone();
            for (p, &ex) in mask.iter().enumerate() {
                if ex {
                    m.data_mut()[p * ch..(p + 1) * ch].copy_from_slice(&b.data()[p * ch..(p + 1) * ch]);
                }
            }
            masked = m;
            &masked
        }
        _ => a,
    };
    let mut value = 0.0;
    let mut ga = Raster::zeros(a.height(), a.width(), ch);
    let mut gb = Raster::zeros(a.height(), a.width(), ch);
    if l1_weight != 0.0 {
        value += l1_weight * l1_raster(a_eff, b);
        let g = l1_raster_grad(a_eff, b);
        for ((oa, ob), d) in ga.data_mut().iter_mut().zip(gb.data_mut().iter_mut()).zip(g.data()) {
            *oa += l1_weight * d;
            *ob -= l1_weight * d;
        }
    }
    if perceptual_weight != 0.0 {
        let (lp, pa, pb) = perceptual_vjp(a_eff, b)?;
        value += perceptual_weight * lp;
        for (o, d) in ga.data_mut().iter_mut().zip(pa.data()) {
            *o += perceptual_weight * d;
        }
        for (o, d) in gb.data_mut().iter_mut().zip(pb.data()) {
            *o += perceptual_weight * d;
        }
    }
    if let Some(mask) = exclude {
        // route the substituted entries of a_eff back to b
        for (p, &ex) in mask.iter().enumerate() {
            if ex {
                for c in 0..ch {
                    let i = p * ch + c;
                    gb.data_mut()[i] += ga.data()[i];
                    ga.data_mut()[i] = 0.0;
                }
            }
        }
    }
    Ok(PairTerm { value, grad_a: ga, grad_b: gb })
}

fn hole_exclusion(mask: &[bool], exclude_holes: bool) -> Option<&[bool]> {
    exclude_holes.then_some(mask)
}

/// `l1 * L1 + perceptual * Lp + smoothness * Ls` for a warped frame against
/// its target. With `exclude_holes`, hole pixels of the warp are left out of
/// the photometric terms.
pub fn predictor_loss(
    warped: &WarpResult,
    target: &Frame,
    flow: &FlowField,
    w: &PredictorLossWeights,
    exclude_holes: bool,
) -> Result<f64> {
    w.validate()?;
    if !warped.frame.same_dims(target) || !flow.matches_raster(target.raster()) {
        return Err(Error::invalid("predictor loss inputs differ in dimensions"));
    }
    let pair = photometric_pair(
        warped.frame.raster(),
        target.raster(),
        hole_exclusion(&warped.hole_mask, exclude_holes),
        w.l1,
        w.perceptual,
    )?;
    let smooth = if w.smoothness != 0.0 { w.smoothness * smoothness_loss(flow)? } else { 0.0 };
    Ok(pair.value + smooth)
}

/// Warps `src` by `flow`, evaluates [`predictor_loss`] against `target` and
/// returns the loss with its gradient with respect to the flow.
pub fn predictor_loss_with_grad(
    src: &Frame,
    target: &Frame,
    flow: &FlowField,
    w: &PredictorLossWeights,
    exclude_holes: bool,
) -> Result<(f64, FlowField)> {
    w.validate()?;
    if !src.same_dims(target) {
        return Err(Error::invalid("predictor loss inputs differ in dimensions"));
    }
    let warped = forward_warp_raster(src.raster(), flow)?;
    let pair = photometric_pair(
        &warped.image,
        target.raster(),
        hole_exclusion(&warped.hole_mask, exclude_holes),
        w.l1,
        w.perceptual,
    )?;
    let (mut grad, _) = warp_vjp(src.raster(), flow, warped.view(), &pair.grad_a)?;
    let mut loss = pair.value;
    if w.smoothness != 0.0 {
        loss += w.smoothness * smoothness_loss(flow)?;
        let gs = smoothness_loss_grad(flow)?;
        grad = grad.combine(1.0, &gs, w.smoothness)?;
    }
    Ok((loss, grad))
}

/// Union of two hole masks.
fn union(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(x, y)| *x || *y).collect()
}

struct CycleTerms {
    start: PairTerm,
    middle: PairTerm,
    end: PairTerm,
}

fn cycle_terms(chain: &CycleChain, w: &CycleLossWeights, exclude_holes: bool) -> Result<CycleTerms> {
    w.validate()?;
    chain.check_dims()?;
    let middle_mask = union(&chain.mid_forward.hole_mask, &chain.mid_backward.hole_mask);
    // Each pair gets its L1 weight; the structural term is summed unweighted
    // over the pairs and scaled by `w.perceptual` once.
    let start = photometric_pair(
        chain.start_reconstructed.frame.raster(),
        chain.start.raster(),
        hole_exclusion(&chain.start_reconstructed.hole_mask, exclude_holes),
        w.start,
        w.perceptual,
    )?;
    let middle = photometric_pair(
        chain.mid_forward.frame.raster(),
        chain.mid_backward.frame.raster(),
        hole_exclusion(&middle_mask, exclude_holes),
        w.intermediate,
        w.perceptual,
    )?;
    let end = photometric_pair(
        chain.end_predicted.frame.raster(),
        chain.end.raster(),
        hole_exclusion(&chain.end_predicted.hole_mask, exclude_holes),
        w.end,
        w.perceptual,
    )?;
    Ok(CycleTerms { start, middle, end })
}

/// Cycle objective over the chain's three comparison pairs.
pub fn cycle_loss(chain: &CycleChain, w: &CycleLossWeights, exclude_holes: bool) -> Result<f64> {
    let t = cycle_terms(chain, w, exclude_holes)?;
    Ok(t.start.value + t.middle.value + t.end.value)
}

/// Gradients of the cycle objective with respect to the four warp flows.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleFlowGradients {
    pub start_to_mid: FlowField,
    pub mid_to_end: FlowField,
    pub end_to_mid: FlowField,
    pub mid_to_start: FlowField,
}

fn add_into(acc: &mut Raster, other: &Raster) {
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

/// Cycle objective of the chain built from `flows`, with its gradient with
/// respect to all four flows, back-propagated through the warp sequence.
pub fn cycle_loss_with_grad(
    chain: &CycleChain,
    flows: &IntermediateFlows,
    w: &CycleLossWeights,
    exclude_holes: bool,
) -> Result<(f64, CycleFlowGradients)> {
    let t = cycle_terms(chain, w, exclude_holes)?;
    let loss = t.start.value + t.middle.value + t.end.value;

    // start_reconstructed = T(mid_backward, mid_to_start)
    let (g_mid_to_start, mut g_mid_backward) = warp_vjp(
        chain.mid_backward.frame.raster(),
        &flows.mid_to_start,
        chain.start_reconstructed.view(),
        &t.start.grad_a,
    )?;
    add_into(&mut g_mid_backward, &t.middle.grad_b);

    // mid_backward = T(end_predicted, end_to_mid)
    let (g_end_to_mid, mut g_end_predicted) = warp_vjp(
        chain.end_predicted.frame.raster(),
        &flows.end_to_mid,
        chain.mid_backward.view(),
        &g_mid_backward,
    )?;
    add_into(&mut g_end_predicted, &t.end.grad_a);

    // end_predicted = T(mid_forward, mid_to_end)
    let (g_mid_to_end, mut g_mid_forward) = warp_vjp(
        chain.mid_forward.frame.raster(),
        &flows.mid_to_end,
        chain.end_predicted.view(),
        &g_end_predicted,
    )?;
    add_into(&mut g_mid_forward, &t.middle.grad_a);

    // mid_forward = T(start, start_to_mid)
    let (g_start_to_mid, _) = warp_vjp(
        chain.start.raster(),
        &flows.start_to_mid,
        chain.mid_forward.view(),
        &g_mid_forward,
    )?;

    Ok((
        loss,
        CycleFlowGradients {
            start_to_mid: g_start_to_mid,
            mid_to_end: g_mid_to_end,
            end_to_mid: g_end_to_mid,
            mid_to_start: g_mid_to_start,
        },
    ))
}
