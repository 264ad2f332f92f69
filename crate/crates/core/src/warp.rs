//! Forward warping by bilinear splatting, and its vector-Jacobian product.
//!
//! Each source pixel `s` at `(x, y)` with flow `(u, v)` lands at
//! `(x + u, y + v)` and deposits its value with bilinear weights onto the
//! four surrounding integer pixels. Targets outside the image are dropped.
//! Colliding deposits are combined by weight normalization; a target whose
//! accumulated weight stays below [`HOLE_WEIGHT_EPS`] is a hole and keeps the
//! source frame's value at the same coordinate.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::imagecore::{FlowField, Frame, LabelMask, Raster};
use crate::math::floor;

/// Accumulated weight below which a target pixel counts as a hole.
pub const HOLE_WEIGHT_EPS: f64 = 1e-4;

/// Output of [`forward_warp`].
#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub frame: Frame,
    /// Accumulated splat weight per pixel.
    pub weights: Vec<f64>,
    pub hole_mask: Vec<bool>,
}

/// Output of [`forward_warp_raster`], for images without a range constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterWarp {
    pub image: Raster,
    pub weights: Vec<f64>,
    pub hole_mask: Vec<bool>,
}

impl WarpResult {
    pub fn hole_count(&self) -> usize {
        self.hole_mask.iter().filter(|&&h| h).count()
    }

    pub fn view(&self) -> WarpView<'_> {
        WarpView { image: self.frame.raster(), weights: &self.weights, hole_mask: &self.hole_mask }
    }
}

impl RasterWarp {
    pub fn view(&self) -> WarpView<'_> {
        WarpView { image: &self.image, weights: &self.weights, hole_mask: &self.hole_mask }
    }
}

/// Borrowed warp output, as needed by [`warp_vjp`].
#[derive(Debug, Clone, Copy)]
pub struct WarpView<'a> {
    pub image: &'a Raster,
    pub weights: &'a [f64],
    pub hole_mask: &'a [bool],
}

/// The (up to) four bilinear targets of a displaced point. Each entry is
/// `(target pixel index, weight, dw/dx, dw/dy)`; out-of-bounds targets are
/// `None`.
#[inline]
fn bilinear_targets(h: usize, w: usize, tx: f64, ty: f64) -> [Option<(usize, f64, f64, f64)>; 4] {
    let fx0 = floor(tx);
    let fy0 = floor(ty);
    let ax = tx - fx0;
    let ay = ty - fy0;
    let x0 = fx0 as isize;
    let y0 = fy0 as isize;
    let at = |dx: isize, dy: isize, wt: f64, gx: f64, gy: f64| {
        let xx = x0 + dx;
        let yy = y0 + dy;
        if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
            Some((yy as usize * w + xx as usize, wt, gx, gy))
        } else {
            None
        }
    };
    [
        at(0, 0, (1.0 - ax) * (1.0 - ay), -(1.0 - ay), -(1.0 - ax)),
        at(1, 0, ax * (1.0 - ay), 1.0 - ay, -ax),
        at(0, 1, (1.0 - ax) * ay, -ay, 1.0 - ax),
        at(1, 1, ax * ay, ay, ax),
    ]
}

/// Destination pixel index and weight derivative.
type Tap = Option<(usize, f64)>;

/// Targets whose weight depends on the horizontal and on the vertical
/// displacement, with `dw/dx` and `dw/dy`. On an integer coordinate the
/// splat is not differentiable along that axis and the mean of the two
/// one-sided derivatives is used.
#[inline]
fn derivative_taps(h: usize, w: usize, tx: f64, ty: f64) -> ([Tap; 4], [Tap; 4]) {
    let fx0 = floor(tx);
    let fy0 = floor(ty);
    let ax = tx - fx0;
    let ay = ty - fy0;
    let x0 = fx0 as isize;
    let y0 = fy0 as isize;
    let tap = |xx: isize, yy: isize, d: f64| {
        (d != 0.0 && xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h)
            .then(|| (yy as usize * w + xx as usize, d))
    };
    let (lo_x, hi_x, sx) = if ax == 0.0 { (x0 - 1, x0 + 1, 0.5) } else { (x0, x0 + 1, 1.0) };
    let (lo_y, hi_y, sy) = if ay == 0.0 { (y0 - 1, y0 + 1, 0.5) } else { (y0, y0 + 1, 1.0) };
    let xs = [
        tap(lo_x, y0, -sx * (1.0 - ay)),
        tap(hi_x, y0, sx * (1.0 - ay)),
        tap(lo_x, y0 + 1, -sx * ay),
        tap(hi_x, y0 + 1, sx * ay),
    ];
    let ys = [
        tap(x0, lo_y, -sy * (1.0 - ax)),
        tap(x0, hi_y, sy * (1.0 - ax)),
        tap(x0 + 1, lo_y, -sy * ax),
        tap(x0 + 1, hi_y, sy * ax),
    ];
    (xs, ys)
}

fn check_dims(src: &Raster, flow: &FlowField) -> Result<()> {
    if !flow.matches_raster(src) {
        return Err(Error::invalid("image and flow dimensions differ"));
    }
    Ok(())
}

/// Unnormalized splat: per-target sums of `w * value` and of `w`.
pub fn splat(src: &Raster, flow: &FlowField) -> Result<(Raster, Vec<f64>)> {
    check_dims(src, flow)?;
    let (h, w, ch) = (src.height(), src.width(), src.channels());
    let mut acc = Raster::zeros(h, w, ch);
    let mut weights = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(x, y);
            let value = src.pixel(x, y);
            for (q, wt, _, _) in bilinear_targets(h, w, x as f64 + u, y as f64 + v).into_iter().flatten() {
                weights[q] += wt;
                let out = &mut acc.data_mut()[q * ch..(q + 1) * ch];
                for (o, s) in out.iter_mut().zip(value) {
                    *o += wt * s;
                }
            }
        }
    }
    Ok((acc, weights))
}

/// Weight-normalized forward warp of an arbitrary raster.
pub fn forward_warp_raster(src: &Raster, flow: &FlowField) -> Result<RasterWarp> {
    let (mut acc, weights) = splat(src, flow)?;
    let ch = src.channels();
    let hole_mask: Vec<bool> = weights.iter().map(|&w| w < HOLE_WEIGHT_EPS).collect();
    let data = acc.data_mut();
    for (p, (&w, &hole)) in weights.iter().zip(&hole_mask).enumerate() {
        let out = &mut data[p * ch..(p + 1) * ch];
        if hole {
            out.copy_from_slice(&src.data()[p * ch..(p + 1) * ch]);
        } else {
            for o in out.iter_mut() {
                *o /= w;
            }
        }
    }
    Ok(RasterWarp { image: acc, weights, hole_mask })
}

/// The warping operator `T(frame, flow)`.
pub fn forward_warp(frame: &Frame, flow: &FlowField) -> Result<WarpResult> {
    let RasterWarp { image, weights, hole_mask } = forward_warp_raster(frame.raster(), flow)?;
    // Normalized deposits are convex combinations; clamping only absorbs rounding.
    let frame = Frame::from_raster_clamped(image)?;
    Ok(WarpResult { frame, weights, hole_mask })
}

/// Warps a label mask with the same splatting as frames: each class is a
/// one-hot channel, the output id is the channel with the largest deposit
/// (lower id wins ties) and holes become background.
pub fn forward_warp_labels(mask: &LabelMask, flow: &FlowField, num_classes: usize) -> Result<LabelMask> {
    let lifted = mask.one_hot(num_classes)?;
    let (acc, weights) = splat(&lifted, flow)?;
    Ok(argmax_labels(&acc, &weights))
}

/// Per-pixel argmax over class channels, holes to background.
pub fn argmax_labels(class_scores: &Raster, weights: &[f64]) -> LabelMask {
    let ch = class_scores.channels();
    LabelMask::from_fn(class_scores.height(), class_scores.width(), |x, y| {
        if weights[y * class_scores.width() + x] < HOLE_WEIGHT_EPS {
            return 0;
        }
        let scores = class_scores.pixel(x, y);
        let mut best = 0;
        for c in 1..ch {
            if scores[c] > scores[best] {
                best = c;
            }
        }
        best as u8
    })
}

/// Vector-Jacobian product of [`forward_warp_raster`].
///
/// Given the warp inputs, its result and `upstream = dL/d(output)`, returns
/// `(dL/dflow, dL/dsrc)`. The quotient rule of the weight normalization is
/// included. Hole outputs copy the source pixel and so pass their adjoint to
/// the source untouched while contributing nothing to the flow gradient.
pub fn warp_vjp(
    src: &Raster,
    flow: &FlowField,
    warped: WarpView<'_>,
    upstream: &Raster,
) -> Result<(FlowField, Raster)> {
    check_dims(src, flow)?;
    if !upstream.same_shape(src) || !warped.image.same_shape(src) {
        return Err(Error::invalid("upstream adjoint shape does not match the warp output"));
    }
    let (h, w, ch) = (src.height(), src.width(), src.channels());
    let out = warped.image.data();
    let up = upstream.data();
    let mut grad = FlowField::zeros(h, w);
    let mut gsrc = Raster::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            let s = y * w + x;
            let (u, v) = flow.at(x, y);
            let value = src.pixel(x, y);
            let (tx, ty) = (x as f64 + u, y as f64 + v);
            for (q, wt, _, _) in bilinear_targets(h, w, tx, ty).into_iter().flatten() {
                if warped.hole_mask[q] {
                    continue;
                }
                let inv = 1.0 / warped.weights[q];
                for c in 0..ch {
                    gsrc.data_mut()[s * ch + c] += wt * up[q * ch + c] * inv;
                }
            }
            let dl_dw = |q: usize| {
                if warped.hole_mask[q] {
                    return 0.0;
                }
                let mut acc = 0.0;
                for c in 0..ch {
                    acc += up[q * ch + c] * (value[c] - out[q * ch + c]);
                }
                acc / warped.weights[q]
            };
            let (xs, ys) = derivative_taps(h, w, tx, ty);
            let gu: f64 = xs.into_iter().flatten().map(|(q, d)| d * dl_dw(q)).sum();
            let gv: f64 = ys.into_iter().flatten().map(|(q, d)| d * dl_dw(q)).sum();
            grad.u_mut()[s] = gu;
            grad.v_mut()[s] = gv;
        }
    }
    for (p, &hole) in warped.hole_mask.iter().enumerate() {
        if hole {
            for c in 0..ch {
                gsrc.data_mut()[p * ch + c] += up[p * ch + c];
            }
        }
    }
    Ok((grad, gsrc))
}

/// Gradient of `loss(forward_warp(frame, flow))` with respect to the flow,
/// given `upstream = dloss/d(output)`.
pub fn warp_flow_gradient(frame: &Frame, flow: &FlowField, upstream: &Raster) -> Result<FlowField> {
    let warped = forward_warp_raster(frame.raster(), flow)?;
    Ok(warp_vjp(frame.raster(), flow, warped.view(), upstream)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (*seed >> 11) as f64 / (1u64 << 53) as f64
    }

    fn random_frame(h: usize, w: usize, c: usize, seed: &mut u64) -> Frame {
        Frame::from_raster(Raster::from_fn(h, w, c, |_, _, _| lcg(seed))).unwrap()
    }

    #[test]
    fn zero_flow_is_identity() {
        let mut s = 7;
        let f = random_frame(6, 5, 3, &mut s);
        let r = forward_warp(&f, &FlowField::zeros(6, 5)).unwrap();
        assert_eq!(r.frame, f);
        assert!(r.weights.iter().all(|&w| w == 1.0));
        assert_eq!(r.hole_count(), 0);
    }

    #[test]
    fn one_row_unit_shift() {
        let (a, b, c) = (0.2, 0.5, 0.9);
        let f = Frame::new(1, 3, 1, vec![a, b, c]).unwrap();
        let r = forward_warp(&f, &FlowField::constant(1, 3, 1.0, 0.0)).unwrap();
        assert_eq!(r.hole_mask, vec![true, false, false]);
        assert_eq!(r.frame.data(), &[a, a, b]);
        assert_eq!(r.weights, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn half_pixel_shift_matches_exhaustive_oracle() {
        let mut s = 11;
        let f = random_frame(3, 3, 1, &mut s);
        let flow = FlowField::constant(3, 3, 0.5, 0.0);
        let r = forward_warp(&f, &flow).unwrap();
        // Oracle: every (source, target) pair, weight from the bilinear hat.
        for ty in 0..3 {
            for tx in 0..3 {
                let (mut num, mut den) = (0.0, 0.0);
                for sy in 0..3 {
                    for sx in 0..3 {
                        let px = sx as f64 + 0.5;
                        let py = sy as f64;
                        let wx = (1.0 - (px - tx as f64).abs()).max(0.0);
                        let wy = (1.0 - (py - ty as f64).abs()).max(0.0);
                        num += wx * wy * f.get(sx, sy, 0);
                        den += wx * wy;
                    }
                }
                let expected = if den < HOLE_WEIGHT_EPS { f.get(tx, ty, 0) } else { num / den };
                assert!((r.frame.get(tx, ty, 0) - expected).abs() < 1e-12);
                if tx > 0 {
                    assert!((r.weights[ty * 3 + tx] - 1.0).abs() < 1e-12);
                } else {
                    assert!((r.weights[ty * 3] - 0.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mass_counts_fully_inside_sources() {
        // Integer shift by 2: the two rightmost columns leave the image entirely.
        let f = Frame::constant(4, 5, 1, 0.5).unwrap();
        let r = forward_warp(&f, &FlowField::constant(4, 5, 2.0, 0.0)).unwrap();
        let total: f64 = r.weights.iter().sum();
        assert!((total - 12.0).abs() < 1e-9);
    }

    #[test]
    fn labels_zero_flow_identity() {
        let m = LabelMask::from_fn(4, 5, |x, y| ((x + y) % 3) as u8);
        assert_eq!(forward_warp_labels(&m, &FlowField::zeros(4, 5), 3).unwrap(), m);
    }

    #[test]
    fn labels_integer_translation() {
        let m = LabelMask::from_fn(5, 5, |x, y| u8::from(x < 2 && y < 2));
        let out = forward_warp_labels(&m, &FlowField::constant(5, 5, 1.0, 1.0), 2).unwrap();
        let expected = LabelMask::from_fn(5, 5, |x, y| u8::from((1..3).contains(&x) && (1..3).contains(&y)));
        assert_eq!(out, expected);
    }

    #[test]
    fn labels_half_shift_matches_one_hot_oracle() {
        // classes 1 | 2 side by side, shifted half a pixel right
        let m = LabelMask::from_fn(2, 6, |x, _| if x < 3 { 1 } else { 2 });
        let flow = FlowField::constant(2, 6, 0.5, 0.0);
        let out = forward_warp_labels(&m, &flow, 3).unwrap();
        for y in 0..2 {
            for tx in 0..6 {
                let mut per_class = [0.0f64; 3];
                let mut total = 0.0;
                for sx in 0..6 {
                    let wgt = (1.0 - (sx as f64 + 0.5 - tx as f64).abs()).max(0.0);
                    per_class[usize::from(m.get(sx, y))] += wgt;
                    total += wgt;
                }
                let mut best = 0;
                for c in 1..3 {
                    if per_class[c] > per_class[best] {
                        best = c;
                    }
                }
                let expected = if total < HOLE_WEIGHT_EPS { 0 } else { best as u8 };
                assert_eq!(out.get(tx, y), expected, "pixel ({tx},{y})");
            }
        }
        // Boundary pixel 3 receives 0.5 from class 1 and 0.5 from class 2; tie goes to 1.
        assert_eq!(out.get(3, 0), 1);
    }

    #[test]
    fn label_ids_validated() {
        let m = LabelMask::from_fn(2, 2, |_, _| 3);
        assert!(matches!(
            forward_warp_labels(&m, &FlowField::zeros(2, 2), 3),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn dim_mismatch_rejected() {
        let f = Frame::constant(3, 3, 1, 0.5).unwrap();
        assert!(forward_warp(&f, &FlowField::zeros(3, 4)).is_err());
        let up = Raster::zeros(3, 3, 3);
        assert!(warp_flow_gradient(&f, &FlowField::zeros(3, 3), &up).is_err());
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let mut s = 5;
        let f = random_frame(5, 5, 1, &mut s);
        let flow = FlowField::from_fn(5, 5, |x, y| (0.3 * x as f64 - 0.4, 0.2 * y as f64 - 0.1));
        let g = warp_flow_gradient(&f, &flow, &Raster::zeros(5, 5, 1)).unwrap();
        assert!(g.u().iter().chain(g.v()).all(|&x| x == 0.0));
    }

    #[test]
    fn constant_frame_insensitive_to_flow() {
        let f = Frame::constant(8, 8, 3, 0.37).unwrap();
        let mut s = 3;
        let flow = FlowField::from_fn(8, 8, |_, _| (lcg(&mut s) * 2.0 - 1.0, lcg(&mut s) * 2.0 - 1.0));
        let up = Raster::from_fn(8, 8, 3, |_, _, _| lcg(&mut s) - 0.5);
        let g = warp_flow_gradient(&f, &flow, &up).unwrap();
        assert!(g.max_abs() < 1e-10, "max |g| = {}", g.max_abs());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut s = 99;
        for _ in 0..5 {
            let f = random_frame(8, 8, 2 * (s as usize % 2) + 1, &mut s);
            // keep fractional parts away from integers so floor() is locally constant
            let mut frac = || {
                let r = lcg(&mut s);
                let k = (lcg(&mut s) * 3.0).floor() - 1.0;
                k + 0.05 + 0.9 * r
            };
            let flow = FlowField::from_fn(8, 8, |_, _| (frac(), frac()));
            let up = Raster::from_fn(8, 8, f.channels(), |_, _, _| lcg(&mut s) - 0.5);
            let loss = |fl: &FlowField| -> f64 {
                let w = forward_warp_raster(f.raster(), fl).unwrap();
                w.image.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            };
            let g = warp_flow_gradient(&f, &flow, &up).unwrap();
            let delta = 1e-4;
            let mut worst = 0.0f64;
            let mut scale = 0.0f64;
            for i in 0..64 {
                for comp in 0..2 {
                    let mut p = flow.clone();
                    let mut m = flow.clone();
                    if comp == 0 {
                        p.u_mut()[i] += delta;
                        m.u_mut()[i] -= delta;
                    } else {
                        p.v_mut()[i] += delta;
                        m.v_mut()[i] -= delta;
                    }
                    let fd = (loss(&p) - loss(&m)) / (2.0 * delta);
                    let an = if comp == 0 { g.u()[i] } else { g.v()[i] };
                    worst = worst.max((fd - an).abs());
                    scale = scale.max(fd.abs());
                }
            }
            assert!(worst / scale < 1e-3, "relative error {}", worst / scale);
        }
    }

    #[test]
    fn source_adjoint_matches_central_differences() {
        let mut s = 1234;
        let src = Raster::from_fn(6, 6, 1, |_, _, _| lcg(&mut s));
        let flow = FlowField::from_fn(6, 6, |_, _| (lcg(&mut s) * 1.8 - 0.9, lcg(&mut s) * 1.8 - 0.9));
        let up = Raster::from_fn(6, 6, 1, |_, _, _| lcg(&mut s) - 0.5);
        let warped = forward_warp_raster(&src, &flow).unwrap();
        let (_, gsrc) = warp_vjp(&src, &flow, warped.view(), &up).unwrap();
        let loss = |r: &Raster| -> f64 {
            let w = forward_warp_raster(r, &flow).unwrap();
            w.image.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        for i in 0..36 {
            let mut p = src.clone();
            let mut m = src.clone();
            p.data_mut()[i] += 1e-4;
            m.data_mut()[i] -= 1e-4;
            let fd = (loss(&p) - loss(&m)) / 2e-4;
            assert!((fd - gsrc.data()[i]).abs() < 1e-8);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn raster_strategy(h: usize, w: usize, c: usize) -> impl Strategy<Value = Raster> {
            proptest::collection::vec(0.0f64..1.0, h * w * c)
                .prop_map(move |d| Raster::new(h, w, c, d).unwrap())
        }

        proptest! {
            #[test]
            fn integer_translation_is_exact_off_holes(
                src in raster_strategy(6, 7, 1), a in -3i32..=3, b in -3i32..=3
            ) {
                let frame = Frame::from_raster(src).unwrap();
                let flow = FlowField::constant(6, 7, f64::from(a), f64::from(b));
                let r = forward_warp(&frame, &flow).unwrap();
                for y in 0..6i32 {
                    for x in 0..7i32 {
                        let (sx, sy) = (x - a, y - b);
                        let inside = (0..7).contains(&sx) && (0..6).contains(&sy);
                        let p = (y * 7 + x) as usize;
                        prop_assert_eq!(r.hole_mask[p], !inside);
                        if inside {
                            prop_assert_eq!(r.frame.get(x as usize, y as usize, 0), frame.get(sx as usize, sy as usize, 0));
                        }
                    }
                }
            }

            #[test]
            fn mass_is_in_bounds_weight(
                flow_vals in proptest::collection::vec(-2.5f64..2.5, 2 * 25)
            ) {
                let u = flow_vals[..25].to_vec();
                let v = flow_vals[25..].to_vec();
                let flow = FlowField::new(5, 5, u, v).unwrap();
                let r = forward_warp(&Frame::constant(5, 5, 1, 0.5).unwrap(), &flow).unwrap();
                let total: f64 = r.weights.iter().sum();
                // Oracle: per source, the bilinear mass that lands in bounds.
                let mut expected = 0.0;
                let mut fully_inside = 0usize;
                for y in 0..5 {
                    for x in 0..5 {
                        let (fu, fv) = flow.at(x, y);
                        let (tx, ty) = (x as f64 + fu, y as f64 + fv);
                        let mut m = 0.0;
                        let mut all_in = true;
                        for (dx, dy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
                            let qx = tx.floor() + dx;
                            let qy = ty.floor() + dy;
                            let wgt = (1.0 - (tx - qx).abs()) * (1.0 - (ty - qy).abs());
                            if (0.0..5.0).contains(&qx) && (0.0..5.0).contains(&qy) {
                                m += wgt;
                            } else if wgt > 0.0 {
                                all_in = false;
                            }
                        }
                        expected += m;
                        if all_in { fully_inside += 1; }
                    }
                }
                prop_assert!((total - expected).abs() < 1e-9);
                prop_assert!(total >= fully_inside as f64 - 1e-9);
                prop_assert!(r.weights.iter().all(|&w| w >= 0.0));
            }

            #[test]
            fn labels_equal_argmax_of_lifted_frame_warp(
                ids in proptest::collection::vec(0u8..4, 36),
                flow_vals in proptest::collection::vec(-2.0f64..2.0, 72)
            ) {
                let mask = LabelMask::new(6, 6, ids).unwrap();
                let flow = FlowField::new(6, 6, flow_vals[..36].to_vec(), flow_vals[36..].to_vec()).unwrap();
                let lifted = mask.one_hot(4).unwrap();
                let w = forward_warp_raster(&lifted, &flow).unwrap();
                let via_frame = argmax_labels(&w.image, &w.weights);
                prop_assert_eq!(via_frame, forward_warp_labels(&mask, &flow, 4).unwrap());
            }
        }
    }
}
