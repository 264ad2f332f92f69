//! Raster types, box pyramids and finite-difference image derivatives.
//!
//! Coordinates: origin top-left, `x` grows rightward (flow `u`), `y` grows
//! downward (flow `v`). A flow vector `(u, v)` stored at pixel `(x, y)` moves
//! that pixel to `(x + u, y + v)`. Pixel `(x, y)` has its center at the
//! integer coordinate.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Multi-channel real image with no range constraint.
///
/// Used for derivatives, feature maps and adjoints; [`Frame`] is the
/// range-checked intensity image built on top of it.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("raster dimensions must be non-zero"));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid("raster data length does not match dimensions"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("raster values must be finite"));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { height, width, channels, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Average over channels, producing a single-channel raster.
    pub fn channel_mean(&self) -> Raster {
        let inv = 1.0 / self.channels as f64;
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() * inv)
            .collect();
        Raster { height: self.height, width: self.width, channels: 1, data }
    }

    /// Single channel `c` as its own raster.
    pub fn channel(&self, c: usize) -> Raster {
        let data = self.data.chunks_exact(self.channels).map(|px| px[c]).collect();
        Raster { height: self.height, width: self.width, channels: 1, data }
    }
}

/// Intensity image with every value in `[0, 1]`; 1 or 3 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    raster: Raster,
}

impl Frame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_raster(Raster::new(height, width, channels, data)?)
    }

    pub fn from_raster(raster: Raster) -> Result<Self> {
        if raster.channels != 1 && raster.channels != 3 {
            return Err(Error::invalid("frames have 1 or 3 channels"));
        }
        if raster.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("frame intensities must lie in [0, 1]"));
        }
        Ok(Self { raster })
    }

    /// Builds a frame from arbitrary values, clamping into `[0, 1]`.
    pub fn from_raster_clamped(mut raster: Raster) -> Result<Self> {
        for v in raster.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Self::from_raster(raster)
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Converts 8-bit samples via `/255`.
    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, channels, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.raster
            .data
            .iter()
            .map(|&v| (v * 255.0 + 0.5) as u8)
            .collect()
    }

    #[inline]
    pub fn raster(&self) -> &Raster {
        &self.raster
    }

    pub fn into_raster(self) -> Raster {
        self.raster
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.raster.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.raster.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.raster.channels
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.raster.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.raster.get(x, y, c)
    }

    pub fn same_dims(&self, other: &Frame) -> bool {
        self.raster.same_shape(&other.raster)
    }
}

/// Per-pixel displacement field in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("flow dimensions must be non-zero"));
        }
        if u.len() != height * width || v.len() != height * width {
            return Err(Error::invalid("flow component length does not match dimensions"));
        }
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::invalid("flow values must be finite"));
        }
        Ok(Self { height, width, u, v })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, u: vec![0.0; height * width], v: vec![0.0; height * width] }
    }

    pub fn constant(height: usize, width: usize, u: f64, v: f64) -> Self {
        Self { height, width, u: vec![u; height * width], v: vec![v; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut u = Vec::with_capacity(height * width);
        let mut v = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                u.push(a);
                v.push(b);
            }
        }
        Self { height, width, u, v }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn u(&self) -> &[f64] {
        &self.u
    }

    #[inline]
    pub fn v(&self) -> &[f64] {
        &self.v
    }

    #[inline]
    pub fn u_mut(&mut self) -> &mut [f64] {
        &mut self.u
    }

    #[inline]
    pub fn v_mut(&mut self) -> &mut [f64] {
        &mut self.v
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn same_dims(&self, other: &FlowField) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn matches_raster(&self, r: &Raster) -> bool {
        self.height == r.height() && self.width == r.width()
    }

    /// `self * a + other * b`, elementwise.
    pub fn combine(&self, a: f64, other: &FlowField, b: f64) -> Result<FlowField> {
        if !self.same_dims(other) {
            return Err(Error::invalid("flow dimensions differ"));
        }
        let mix = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| a * x + b * y).collect();
        Ok(FlowField {
            height: self.height,
            width: self.width,
            u: mix(&self.u, &other.u),
            v: mix(&self.v, &other.v),
        })
    }

    pub fn scaled(&self, s: f64) -> FlowField {
        FlowField {
            height: self.height,
            width: self.width,
            u: self.u.iter().map(|x| x * s).collect(),
            v: self.v.iter().map(|x| x * s).collect(),
        }
    }

    /// Largest absolute component.
    pub fn max_abs(&self) -> f64 {
        self.u.iter().chain(self.v.iter()).fold(0.0, |m, x| m.max(crate::math::abs(*x)))
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }
}

/// Per-pixel class ids, `0` is background.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMask {
    height: usize,
    width: usize,
    ids: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("mask dimensions must be non-zero"));
        }
        if ids.len() != height * width {
            return Err(Error::invalid("mask length does not match dimensions"));
        }
        Ok(Self { height, width, ids })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self { height, width, ids: vec![0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut ids = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                ids.push(f(x, y));
            }
        }
        Self { height, width, ids }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    pub fn same_dims(&self, other: &LabelMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Checks every id against `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| usize::from(id) >= num_classes) {
            Some(id) => Err(Error::InvalidArgument(alloc::format!(
                "class id {id} is not below num_classes = {num_classes}"
            ))),
            None => Ok(()),
        }
    }

    /// One-hot lift: one channel per class.
    pub fn one_hot(&self, num_classes: usize) -> Result<Raster> {
        self.validate(num_classes)?;
        if num_classes == 0 {
            return Err(Error::invalid("num_classes must be at least 1"));
        }
        let mut data = vec![0.0; self.ids.len() * num_classes];
        for (i, &id) in self.ids.iter().enumerate() {
            data[i * num_classes + usize::from(id)] = 1.0;
        }
        Raster::new(self.height, self.width, num_classes, data)
    }
}

fn check_factor(factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(Error::invalid("downsample factor must be at least 1"));
    }
    if !factor.is_power_of_two() {
        return Err(Error::invalid("downsample factor must be a power of two"));
    }
    Ok(())
}

/// Box-average downsampling by `factor`; output dims are ceil-divided and a
/// partial border block averages only the pixels it covers.
pub fn downsample_raster(r: &Raster, factor: usize) -> Result<Raster> {
    check_factor(factor)?;
    if factor == 1 {
        return Ok(r.clone());
    }
    let (h, w, ch) = (r.height, r.width, r.channels);
    let oh = h.div_ceil(factor);
    let ow = w.div_ceil(factor);
    let mut out = Raster::zeros(oh, ow, ch);
    for oy in 0..oh {
        let y1 = ((oy + 1) * factor).min(h);
        for ox in 0..ow {
            let x1 = ((ox + 1) * factor).min(w);
            let count = ((y1 - oy * factor) * (x1 - ox * factor)) as f64;
            let o = out.index(ox, oy, 0);
            for y in oy * factor..y1 {
                for x in ox * factor..x1 {
                    let i = r.index(x, y, 0);
                    for c in 0..ch {
                        out.data[o + c] += r.data[i + c];
                    }
                }
            }
            for c in 0..ch {
                out.data[o + c] /= count;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`downsample_raster`]: spreads each coarse adjoint evenly over
/// its source block.
pub fn downsample_adjoint(coarse: &Raster, height: usize, width: usize, factor: usize) -> Result<Raster> {
    check_factor(factor)?;
    if coarse.height != height.div_ceil(factor) || coarse.width != width.div_ceil(factor) {
        return Err(Error::invalid("adjoint shape does not match the downsampled shape"));
    }
    let ch = coarse.channels;
    let mut out = Raster::zeros(height, width, ch);
    for oy in 0..coarse.height {
        let y1 = ((oy + 1) * factor).min(height);
        for ox in 0..coarse.width {
            let x1 = ((ox + 1) * factor).min(width);
            let count = ((y1 - oy * factor) * (x1 - ox * factor)) as f64;
            let o = coarse.index(ox, oy, 0);
            for y in oy * factor..y1 {
                for x in ox * factor..x1 {
                    let i = out.index(x, y, 0);
                    for c in 0..ch {
                        out.data[i + c] += coarse.data[o + c] / count;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn downsample(frame: &Frame, factor: usize) -> Result<Frame> {
    // Block means of values in [0, 1] stay in range up to rounding.
    Frame::from_raster_clamped(downsample_raster(frame.raster(), factor)?)
}

/// Bilinear sample of a single-channel row-major grid, coordinates clamped
/// to the grid.
fn sample_bilinear(grid: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = crate::math::floor(x) as usize;
    let y0 = crate::math::floor(y) as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = grid[y0 * w + x0] * (1.0 - fx) + grid[y0 * w + x1] * fx;
    let bottom = grid[y1 * w + x0] * (1.0 - fx) + grid[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Maps destination index to source coordinate with corner pixels aligned.
#[inline]
fn corner_aligned(dst: usize, old: usize, new: usize) -> f64 {
    if new == 1 || old == 1 {
        0.0
    } else {
        dst as f64 * (old - 1) as f64 / (new - 1) as f64
    }
}

/// Resamples a flow to `new_h x new_w` and rescales the vectors into
/// destination-pixel units (`u * new_w / old_w`, `v * new_h / old_h`).
///
/// Sampling aligns corner pixel centers, so linear fields are reproduced
/// exactly in both directions.
pub fn resize_flow(flow: &FlowField, new_h: usize, new_w: usize) -> Result<FlowField> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::invalid("target flow dimensions must be non-zero"));
    }
    let (h, w) = (flow.height, flow.width);
    if (new_h, new_w) == (h, w) {
        return Ok(flow.clone());
    }
    let su = new_w as f64 / w as f64;
    let sv = new_h as f64 / h as f64;
    Ok(FlowField::from_fn(new_h, new_w, |x, y| {
        let sx = corner_aligned(x, w, new_w);
        let sy = corner_aligned(y, h, new_h);
        (
            sample_bilinear(&flow.u, h, w, sx, sy) * su,
            sample_bilinear(&flow.v, h, w, sx, sy) * sv,
        )
    }))
}

/// Derivative along one axis of a line of samples: central differences
/// inside, one-sided at the ends, zero for a single sample.
#[inline]
fn stencil(len: usize, i: usize) -> (usize, usize, f64) {
    if len == 1 {
        (0, 0, 0.0)
    } else if i == 0 {
        (1, 0, 1.0)
    } else if i == len - 1 {
        (len - 1, len - 2, 1.0)
    } else {
        (i + 1, i - 1, 0.5)
    }
}

/// Per-channel spatial derivatives `(d/dx, d/dy)`.
pub fn raster_gradient(r: &Raster) -> (Raster, Raster) {
    let (h, w, ch) = (r.height, r.width, r.channels);
    let mut gx = Raster::zeros(h, w, ch);
    let mut gy = Raster::zeros(h, w, ch);
    for y in 0..h {
        let (yp, ym, sy) = stencil(h, y);
        for x in 0..w {
            let (xp, xm, sx) = stencil(w, x);
            for c in 0..ch {
                let o = r.index(x, y, c);
                gx.data[o] = sx * (r.get(xp, y, c) - r.get(xm, y, c));
                gy.data[o] = sy * (r.get(x, yp, c) - r.get(x, ym, c));
            }
        }
    }
    (gx, gy)
}

/// Transpose of [`raster_gradient`]: given adjoints for `gx` and `gy`,
/// accumulates the adjoint of the input.
pub fn raster_gradient_adjoint(adj_gx: &Raster, adj_gy: &Raster) -> Result<Raster> {
    if !adj_gx.same_shape(adj_gy) {
        return Err(Error::invalid("gradient adjoints differ in shape"));
    }
    let (h, w, ch) = (adj_gx.height, adj_gx.width, adj_gx.channels);
    let mut out = Raster::zeros(h, w, ch);
    for y in 0..h {
        let (yp, ym, sy) = stencil(h, y);
        for x in 0..w {
            let (xp, xm, sx) = stencil(w, x);
            for c in 0..ch {
                let o = adj_gx.index(x, y, c);
                let ax = sx * adj_gx.data[o];
                let ay = sy * adj_gy.data[o];
                if sx != 0.0 {
                    out.data[adj_gx.index(xp, y, c)] += ax;
                    out.data[adj_gx.index(xm, y, c)] -= ax;
                }
                if sy != 0.0 {
                    out.data[adj_gx.index(x, yp, c)] += ay;
                    out.data[adj_gx.index(x, ym, c)] -= ay;
                }
            }
        }
    }
    Ok(out)
}

/// Spatial derivatives of a frame; requires at least 2x2 pixels.
pub fn image_gradient(frame: &Frame) -> Result<(Raster, Raster)> {
    if frame.height() < 2 || frame.width() < 2 {
        return Err(Error::invalid("image_gradient needs at least 2x2 pixels"));
    }
    Ok(raster_gradient(frame.raster()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Frame {
        Frame::from_raster(Raster::from_fn(h, w, 1, |x, y, _| (x + w * y) as f64 / (h * w) as f64)).unwrap()
    }

    #[test]
    fn box_average_of_two_by_two() {
        let f = Frame::new(2, 2, 1, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let d = downsample(&f, 2).unwrap();
        assert_eq!((d.height(), d.width()), (1, 1));
        assert_eq!(d.data(), &[0.5]);
    }

    #[test]
    fn factor_one_is_identity() {
        let f = ramp(5, 3);
        assert_eq!(downsample(&f, 1).unwrap(), f);
    }

    #[test]
    fn bad_factors_rejected() {
        let f = ramp(4, 4);
        assert!(matches!(downsample(&f, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(downsample(&f, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn ramp_block_means_match_loop() {
        let f = ramp(4, 4);
        let d = downsample(&f, 2).unwrap();
        for by in 0..2 {
            for bx in 0..2 {
                let mut s = 0.0;
                for y in 2 * by..2 * by + 2 {
                    for x in 2 * bx..2 * bx + 2 {
                        s += f.get(x, y, 0);
                    }
                }
                assert_eq!(d.get(bx, by, 0), s / 4.0);
            }
        }
    }

    #[test]
    fn ceil_divided_partial_blocks() {
        let f = ramp(5, 3);
        let d = downsample(&f, 2).unwrap();
        assert_eq!((d.height(), d.width()), (3, 2));
        // bottom-right block covers the single pixel (2, 4)
        assert_eq!(d.get(1, 2, 0), f.get(2, 4, 0));
    }

    #[test]
    fn downsample_adjoint_is_transpose() {
        let r = Raster::from_fn(5, 7, 2, |x, y, c| (x * 3 + y * 5 + c) as f64 * 0.1);
        let d = downsample_raster(&r, 2).unwrap();
        let g = Raster::from_fn(d.height(), d.width(), 2, |x, y, c| (x + 2 * y + c) as f64 - 1.5);
        let back = downsample_adjoint(&g, 5, 7, 2).unwrap();
        let lhs: f64 = d.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = r.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn constant_flow_upsampled_doubles() {
        let f = FlowField::constant(8, 8, 2.0, 0.0);
        let g = resize_flow(&f, 16, 16).unwrap();
        assert!(g.u().iter().all(|&u| (u - 4.0).abs() < 1e-12));
        assert!(g.v().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_to_same_dims_is_identity() {
        let f = FlowField::from_fn(5, 6, |x, y| (x as f64 * 0.3, y as f64 - 2.0));
        assert_eq!(resize_flow(&f, 5, 6).unwrap(), f);
        assert!(resize_flow(&f, 0, 6).is_err());
    }

    #[test]
    fn resize_down_up_matches_reference_bilinear() {
        // Reference: evaluate corner-aligned bilinear interpolation directly.
        fn reference(src: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
            let mut out = Vec::new();
            for y in 0..nh {
                for x in 0..nw {
                    let sx = x as f64 * (w - 1) as f64 / (nw - 1) as f64;
                    let sy = y as f64 * (h - 1) as f64 / (nh - 1) as f64;
                    let x0 = (sx.floor() as usize).min(w - 2);
                    let y0 = (sy.floor() as usize).min(h - 2);
                    let (tx, ty) = (sx - x0 as f64, sy - y0 as f64);
                    let p = |xx: usize, yy: usize| src[yy * w + xx];
                    out.push(
                        p(x0, y0) * (1.0 - tx) * (1.0 - ty)
                            + p(x0 + 1, y0) * tx * (1.0 - ty)
                            + p(x0, y0 + 1) * (1.0 - tx) * ty
                            + p(x0 + 1, y0 + 1) * tx * ty,
                    );
                }
            }
            out
        }
        let f = FlowField::from_fn(16, 16, |x, _| (x as f64 * 0.25, 0.0));
        let down = resize_flow(&f, 8, 8).unwrap();
        let up = resize_flow(&down, 16, 16).unwrap();
        let ref_down: Vec<f64> = reference(f.u(), 16, 16, 8, 8).iter().map(|u| u * 0.5).collect();
        let ref_up: Vec<f64> = reference(&ref_down, 8, 8, 16, 16).iter().map(|u| u * 2.0).collect();
        for (a, b) in down.u().iter().zip(&ref_down) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in up.u().iter().zip(&ref_up) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_frame_has_zero_gradient() {
        let f = Frame::constant(4, 5, 3, 0.3).unwrap();
        let (gx, gy) = image_gradient(&f).unwrap();
        assert!(gx.data().iter().chain(gy.data()).all(|&g| g == 0.0));
    }

    #[test]
    fn horizontal_ramp_gradient() {
        let w = 8;
        let f = Frame::from_raster(Raster::from_fn(3, w, 1, |x, _, _| x as f64 / w as f64)).unwrap();
        let (gx, gy) = image_gradient(&f).unwrap();
        for y in 0..3 {
            for x in 1..w - 1 {
                assert!((gx.get(x, y, 0) - 1.0 / w as f64).abs() < 1e-15);
            }
        }
        assert!(gy.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_matches_direct_stencil() {
        let vals = [
            0.12, 0.87, 0.33, 0.45, 0.91, 0.05, 0.66, 0.29, 0.71, 0.18, 0.54, 0.99, 0.42, 0.07,
            0.63, 0.38, 0.81, 0.24, 0.57, 0.93, 0.15, 0.48, 0.76, 0.02, 0.69,
        ];
        let f = Frame::new(5, 5, 1, vals.to_vec()).unwrap();
        let (gx, gy) = image_gradient(&f).unwrap();
        let at = |x: usize, y: usize| vals[y * 5 + x];
        for y in 0..5 {
            for x in 0..5 {
                let ex = match x {
                    0 => at(1, y) - at(0, y),
                    4 => at(4, y) - at(3, y),
                    _ => (at(x + 1, y) - at(x - 1, y)) / 2.0,
                };
                let ey = match y {
                    0 => at(x, 1) - at(x, 0),
                    4 => at(x, 4) - at(x, 3),
                    _ => (at(x, y + 1) - at(x, y - 1)) / 2.0,
                };
                assert_eq!(gx.get(x, y, 0), ex);
                assert_eq!(gy.get(x, y, 0), ey);
            }
        }
    }

    #[test]
    fn gradient_adjoint_is_transpose() {
        let r = Raster::from_fn(4, 6, 2, |x, y, c| ((x * 7 + y * 3 + c * 5) % 11) as f64 * 0.1);
        let (gx, gy) = raster_gradient(&r);
        let ax = Raster::from_fn(4, 6, 2, |x, y, c| ((x + y * 2 + c) % 5) as f64 - 2.0);
        let ay = Raster::from_fn(4, 6, 2, |x, y, c| ((x * 3 + y + c) % 7) as f64 - 3.0);
        let back = raster_gradient_adjoint(&ax, &ay).unwrap();
        let lhs: f64 = gx.data().iter().zip(ax.data()).map(|(a, b)| a * b).sum::<f64>()
            + gy.data().iter().zip(ay.data()).map(|(a, b)| a * b).sum::<f64>();
        let rhs: f64 = r.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn image_gradient_rejects_single_row() {
        let f = Frame::constant(1, 4, 1, 0.5).unwrap();
        assert!(image_gradient(&f).is_err());
    }

    #[test]
    fn frame_range_checked() {
        assert!(Frame::new(1, 2, 1, vec![0.0, 1.5]).is_err());
        assert!(Frame::new(1, 2, 2, vec![0.0; 4]).is_err());
        assert!(Frame::new(1, 1, 1, vec![f64::NAN]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn two_halvings_equal_one_quartering(
                vals in proptest::collection::vec(0.0f64..1.0, 8 * 12)
            ) {
                let f = Frame::new(8, 12, 1, vals).unwrap();
                let twice = downsample(&downsample(&f, 2).unwrap(), 2).unwrap();
                let once = downsample(&f, 4).unwrap();
                for (a, b) in twice.data().iter().zip(once.data()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn smooth_flow_survives_up_down_round_trip(
                a in -3.0f64..3.0, b in -2.0f64..2.0, c in -2.0f64..2.0
            ) {
                let n = 32;
                let f = FlowField::from_fn(n, n, |x, y| {
                    let (xf, yf) = (x as f64 / n as f64, y as f64 / n as f64);
                    (a + b * xf + c * yf, b - a * yf + c * xf)
                });
                let back = resize_flow(&resize_flow(&f, 2 * n, 2 * n).unwrap(), n, n).unwrap();
                let mag = f.max_abs().max(1e-9);
                for (p, q) in f.u().iter().chain(f.v()).zip(back.u().iter().chain(back.v())) {
                    prop_assert!((p - q).abs() < 1e-3 * mag);
                }
            }
        }
    }
}
