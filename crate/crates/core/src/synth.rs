//! Deterministic synthetic video with exact ground-truth motion.
//!
//! A scene is a procedural background texture (optionally drifting) with
//! rigid textured shapes that translate and rotate at constant rates. Frames
//! are rendered with 4x4 supersampling per pixel so sub-pixel motion changes
//! intensities smoothly; masks and ground-truth flows come from the same
//! analytic geometry evaluated at pixel centers.

use alloc::vec::Vec;
use alloc::format;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imagecore::{FlowField, Frame, LabelMask, Raster};
use crate::math::{cos, pow, sin, sqrt, tanh};

const SUPERSAMPLE: usize = 4;
const WAVES: usize = 12;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Geometry {
    /// Vertices relative to the shape's rotation center.
    Polygon { vertices: Vec<[f64; 2]> },
    Ellipse { semi_axes: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ShapeSpec {
    pub geometry: Geometry,
    pub class_id: u8,
    /// Rotation center at frame 0, in pixels.
    pub center: [f64; 2],
    /// Pixels per frame.
    #[cfg_attr(feature = "serde", serde(default))]
    pub velocity: [f64; 2],
    /// Degrees per frame about the center; positive turns +x toward +y.
    #[cfg_attr(feature = "serde", serde(default))]
    pub angular_velocity_deg: f64,
}

impl ShapeSpec {
    /// Axis-aligned square with side `side` centered at `center`.
    pub fn square(class_id: u8, center: [f64; 2], side: f64, velocity: [f64; 2]) -> Self {
        let h = side / 2.0;
        Self {
            geometry: Geometry::Polygon { vertices: alloc::vec![[-h, -h], [h, -h], [h, h], [-h, h]] },
            class_id,
            center,
            velocity,
            angular_velocity_deg: 0.0,
        }
    }

    fn radius(&self) -> f64 {
        match &self.geometry {
            Geometry::Polygon { vertices } => vertices
                .iter()
                .map(|v| sqrt(v[0] * v[0] + v[1] * v[1]))
                .fold(0.0, f64::max),
            Geometry::Ellipse { semi_axes } => semi_axes[0].max(semi_axes[1]),
        }
    }

    fn pose(&self, time: f64) -> Pose {
        let angle = time * self.angular_velocity_deg.to_radians();
        Pose {
            cx: self.center[0] + time * self.velocity[0],
            cy: self.center[1] + time * self.velocity[1],
            cos: cos(angle),
            sin: sin(angle),
        }
    }

    fn contains_local(&self, qx: f64, qy: f64) -> bool {
        match &self.geometry {
            Geometry::Ellipse { semi_axes: [a, b] } => (qx / a) * (qx / a) + (qy / b) * (qy / b) <= 1.0,
            Geometry::Polygon { vertices } => {
                let mut inside = false;
                let n = vertices.len();
                for i in 0..n {
                    let [xi, yi] = vertices[i];
                    let [xj, yj] = vertices[(i + n - 1) % n];
                    if (yi > qy) != (yj > qy) && qx < (xj - xi) * (qy - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Pose {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
}

impl Pose {
    /// World point to shape-local coordinates.
    fn to_local(self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_channels"))]
    pub channels: usize,
    /// Seed of the procedural textures.
    pub background_seed: u64,
    /// Uniform background drift in pixels per frame.
    #[cfg_attr(feature = "serde", serde(default))]
    pub background_velocity: [f64; 2],
    #[cfg_attr(feature = "serde", serde(default))]
    pub shapes: Vec<ShapeSpec>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub noise_sigma: f64,
}

#[cfg(feature = "serde")]
fn default_channels() -> usize {
    1
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.num_frames == 0 {
            return Err(Error::invalid("scene dimensions and frame count must be non-zero"));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::invalid("scene channels must be 1 or 3"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and non-negative"));
        }
        let mut seen = Vec::new();
        for (k, shape) in self.shapes.iter().enumerate() {
            if shape.class_id == 0 {
                return Err(Error::InvalidArgument(format!("shape {k}: class id 0 is background")));
            }
            if seen.contains(&shape.class_id) {
                return Err(Error::InvalidArgument(format!("shape {k}: duplicate class id {}", shape.class_id)));
            }
            seen.push(shape.class_id);
            match &shape.geometry {
                Geometry::Polygon { vertices } if vertices.len() < 3 => {
                    return Err(Error::InvalidArgument(format!("shape {k}: polygon needs 3 vertices")));
                }
                Geometry::Ellipse { semi_axes } if !(semi_axes[0] > 0.0 && semi_axes[1] > 0.0) => {
                    return Err(Error::InvalidArgument(format!("shape {k}: semi-axes must be positive")));
                }
                _ => {}
            }
            // constant-velocity motion: extremes are at the first and last frame
            let r = shape.radius();
            for t in [0, self.num_frames - 1] {
                let p = shape.pose(t as f64);
                let fits = p.cx - r >= 0.0
                    && p.cy - r >= 0.0
                    && p.cx + r <= (self.width - 1) as f64
                    && p.cy + r <= (self.height - 1) as f64;
                if !fits {
                    return Err(Error::InvalidArgument(format!("shape {k} leaves the frame by frame {t}")));
                }
            }
        }
        Ok(())
    }

    /// Largest class id plus one (at least 1).
    pub fn num_classes(&self) -> usize {
        self.shapes.iter().map(|s| usize::from(s.class_id) + 1).max().unwrap_or(1)
    }
}

/// Parameters of a procedural texture.
struct TextureStyle {
    mean: f64,
    amplitude: f64,
    wavelengths: (f64, f64),
    /// Amplitude proportional to wavelength (a natural-image-like
    /// spectrum) instead of flat.
    pink: bool,
    /// Gain of the `tanh` squashing; large values give a high-contrast,
    /// nearly two-level pattern with smooth transitions.
    saturation: f64,
}

const BACKGROUND: TextureStyle =
    TextureStyle { mean: 0.35, amplitude: 0.25, wavelengths: (8.0, 64.0), pink: true, saturation: 0.8 };
const SHAPE: TextureStyle =
    TextureStyle { mean: 0.6, amplitude: 0.3, wavelengths: (3.0, 8.0), pink: false, saturation: 2.5 };

/// `mean + amplitude * tanh(saturation * s)` where `s` is a unit-variance
/// sum of plane waves, so values stay within `mean ± amplitude`.
#[derive(Debug, Clone)]
struct Texture {
    mean: f64,
    amplitude: f64,
    saturation: f64,
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, style: &TextureStyle, mean_offset: f64) -> Self {
        let (shortest, longest) = style.wavelengths;
        let mut waves = Vec::with_capacity(WAVES);
        let mut power = 0.0;
        for _ in 0..WAVES {
            let wavelength = shortest * pow(longest / shortest, rng.random_range(0.0..1.0));
            let dir = rng.random_range(0.0..core::f64::consts::TAU);
            let k = core::f64::consts::TAU / wavelength;
            let amp = if style.pink { wavelength } else { 1.0 } * rng.random_range(0.5..1.0);
            let phase = rng.random_range(0.0..core::f64::consts::TAU);
            power += amp * amp / 2.0;
            waves.push((k * cos(dir), k * sin(dir), amp, phase));
        }
        let norm = 1.0 / sqrt(power);
        for w in waves.iter_mut() {
            w.2 *= norm;
        }
        Self { mean: style.mean + mean_offset, amplitude: style.amplitude, saturation: style.saturation, waves }
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        let s: f64 = self.waves.iter().map(|&(kx, ky, a, p)| a * sin(kx * x + ky * y + p)).sum();
        self.mean + self.amplitude * tanh(self.saturation * s)
    }
}

struct Scene<'a> {
    spec: &'a SceneSpec,
    background: Vec<Texture>,
    shapes: Vec<Vec<Texture>>,
}

impl<'a> Scene<'a> {
    fn new(spec: &'a SceneSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.background_seed);
        let channel_offset = |c: usize| 0.05 * c as f64;
        let background = (0..spec.channels)
            .map(|c| Texture::random(&mut rng, &BACKGROUND, channel_offset(c)))
            .collect();
        let shapes = spec
            .shapes
            .iter()
            .map(|_| {
                (0..spec.channels)
                    .map(|c| Texture::random(&mut rng, &SHAPE, -channel_offset(c)))
                    .collect()
            })
            .collect();
        Self { spec, background, shapes }
    }

    /// Top-most shape covering world point `(x, y)` at `time`, with the
    /// point in its local coordinates.
    fn hit(&self, poses: &[Pose], x: f64, y: f64) -> Option<(usize, f64, f64)> {
        self.spec.shapes.iter().enumerate().rev().find_map(|(k, s)| {
            let (qx, qy) = poses[k].to_local(x, y);
            s.contains_local(qx, qy).then_some((k, qx, qy))
        })
    }

    fn poses(&self, time: f64) -> Vec<Pose> {
        self.spec.shapes.iter().map(|s| s.pose(time)).collect()
    }

    fn render(&self, time: f64) -> Raster {
        let spec = self.spec;
        let poses = self.poses(time);
        let [dx, dy] = spec.background_velocity;
        let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        let mut out = Raster::zeros(spec.height, spec.width, spec.channels);
        let mut sample = [0.0f64; 3];
        for y in 0..spec.height {
            for x in 0..spec.width {
                sample[..spec.channels].fill(0.0);
                for sy in 0..SUPERSAMPLE {
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                        match self.hit(&poses, px, py) {
                            Some((k, qx, qy)) => {
                                for (c, t) in self.shapes[k].iter().enumerate() {
                                    sample[c] += t.eval(qx, qy);
                                }
                            }
                            None => {
                                let (bx, by) = (px - time * dx, py - time * dy);
                                for (c, t) in self.background.iter().enumerate() {
                                    sample[c] += t.eval(bx, by);
                                }
                            }
                        }
                    }
                }
                let o = out.index(x, y, 0);
                for (d, s) in out.data_mut()[o..o + spec.channels].iter_mut().zip(&sample) {
                    *d = (s * inv).clamp(0.0, 1.0);
                }
            }
        }
        out
    }

    fn mask(&self, time: f64) -> LabelMask {
        let poses = self.poses(time);
        LabelMask::from_fn(self.spec.height, self.spec.width, |x, y| {
            self.hit(&poses, x as f64, y as f64).map_or(0, |(k, _, _)| self.spec.shapes[k].class_id)
        })
    }
}

fn add_noise(raster: &mut Raster, sigma: f64, seed: u64, stream: u64) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|_| Error::invalid("bad noise sigma"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    for v in raster.data_mut() {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(())
}

/// Frame at integer index `t`, noise drawn from stream `t` of `seed`.
pub fn render_frame(spec: &SceneSpec, t: usize, seed: u64) -> Result<Frame> {
    spec.validate()?;
    if t >= spec.num_frames {
        return Err(Error::invalid("frame index out of range"));
    }
    let mut r = Scene::new(spec).render(t as f64);
    add_noise(&mut r, spec.noise_sigma, seed, t as u64)?;
    Frame::from_raster(r)
}

/// Noise-free frame at an arbitrary (possibly fractional) time.
pub fn render_frame_at(spec: &SceneSpec, time: f64) -> Result<Frame> {
    spec.validate()?;
    Frame::from_raster(Scene::new(spec).render(time))
}

/// Label mask at an arbitrary time.
pub fn render_mask_at(spec: &SceneSpec, time: f64) -> Result<LabelMask> {
    spec.validate()?;
    Ok(Scene::new(spec).mask(time))
}

/// All frames and masks of the scene.
pub fn render_sequence(spec: &SceneSpec, seed: u64) -> Result<(Vec<Frame>, Vec<LabelMask>)> {
    spec.validate()?;
    let scene = Scene::new(spec);
    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut masks = Vec::with_capacity(spec.num_frames);
    for t in 0..spec.num_frames {
        let mut r = scene.render(t as f64);
        add_noise(&mut r, spec.noise_sigma, seed, t as u64)?;
        frames.push(Frame::from_raster(r)?);
        masks.push(scene.mask(t as f64));
    }
    Ok((frames, masks))
}

/// Exact displacement of every pixel center from frame `t` to `t + 1`.
pub fn ground_truth_flow(spec: &SceneSpec, t: usize) -> Result<FlowField> {
    spec.validate()?;
    if t + 1 >= spec.num_frames {
        return Err(Error::invalid("ground-truth flow needs frames t and t + 1"));
    }
    let scene = Scene::new(spec);
    let time = t as f64;
    let poses = scene.poses(time);
    let [bx, by] = spec.background_velocity;
    Ok(FlowField::from_fn(spec.height, spec.width, |x, y| {
        let (px, py) = (x as f64, y as f64);
        match scene.hit(&poses, px, py) {
            None => (bx, by),
            Some((k, _, _)) => {
                let s = &spec.shapes[k];
                let p = poses[k];
                let w = s.angular_velocity_deg.to_radians();
                let (c, sn) = (cos(w), sin(w));
                let (dx, dy) = (px - p.cx, py - p.cy);
                let nx = p.cx + s.velocity[0] + c * dx - sn * dy;
                let ny = p.cy + s.velocity[1] + sn * dx + c * dy;
                (nx - px, ny - py)
            }
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn one_square(velocity: [f64; 2]) -> SceneSpec {
        SceneSpec {
            width: 32,
            height: 32,
            num_frames: 5,
            channels: 1,
            background_seed: 3,
            background_velocity: [0.0, 0.0],
            shapes: vec![ShapeSpec::square(1, [10.0, 12.0], 8.0, velocity)],
            noise_sigma: 0.0,
        }
    }

    fn centroid(m: &LabelMask, class: u8) -> (f64, f64) {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.get(x, y) == class {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1.0;
                }
            }
        }
        (sx / n, sy / n)
    }

    #[test]
    fn static_scene_frames_identical() {
        let (frames, masks) = render_sequence(&one_square([0.0, 0.0]), 1).unwrap();
        assert!(frames.windows(2).all(|w| w[0] == w[1]));
        assert!(masks.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(ground_truth_flow(&one_square([0.0, 0.0]), 0).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn deterministic_with_noise() {
        let mut spec = one_square([1.0, 0.5]);
        spec.noise_sigma = 0.02;
        assert_eq!(render_sequence(&spec, 42).unwrap(), render_sequence(&spec, 42).unwrap());
        assert_ne!(render_sequence(&spec, 42).unwrap().0, render_sequence(&spec, 43).unwrap().0);
        assert_eq!(render_frame(&spec, 3, 42).unwrap(), render_sequence(&spec, 42).unwrap().0[3]);
    }

    #[test]
    fn square_centroid_advances_one_pixel() {
        let (_, masks) = render_sequence(&one_square([1.0, 0.0]), 0).unwrap();
        let c0 = centroid(&masks[0], 1);
        for (t, m) in masks.iter().enumerate() {
            let c = centroid(m, 1);
            assert!((c.0 - c0.0 - t as f64).abs() < 1e-12);
            assert!((c.1 - c0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_flow_constant_inside_shape() {
        let spec = one_square([1.5, -0.5]);
        let flow = ground_truth_flow(&spec, 1).unwrap();
        let mask = render_mask_at(&spec, 1.0).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let expected = if mask.get(x, y) == 1 { (1.5, -0.5) } else { (0.0, 0.0) };
                assert_eq!(flow.at(x, y), expected);
            }
        }
        assert!(ground_truth_flow(&spec, 4).is_err());
    }

    #[test]
    fn rotation_flow_matches_trig_loop() {
        let mut spec = one_square([0.0, 0.0]);
        spec.shapes[0].center = [16.0, 16.0];
        spec.shapes[0].angular_velocity_deg = 10.0;
        let flow = ground_truth_flow(&spec, 2).unwrap();
        let mask = render_mask_at(&spec, 2.0).unwrap();
        let w = 10.0f64.to_radians();
        for y in 0..32 {
            for x in 0..32 {
                if mask.get(x, y) != 1 {
                    continue;
                }
                let (dx, dy) = (x as f64 - 16.0, y as f64 - 16.0);
                let ex = dx * w.cos() - dy * w.sin() - dx;
                let ey = dx * w.sin() + dy * w.cos() - dy;
                let (u, v) = flow.at(x, y);
                assert!((u - ex).abs() < 1e-12 && (v - ey).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_bounds_shape_rejected() {
        let spec = one_square([6.0, 0.0]);
        assert!(matches!(spec.validate(), Err(Error::InvalidArgument(_))));
        let mut dup = one_square([0.0, 0.0]);
        dup.shapes.push(ShapeSpec::square(1, [20.0, 20.0], 4.0, [0.0, 0.0]));
        assert!(dup.validate().is_err());
    }

    #[test]
    fn colour_frames_in_range() {
        let mut spec = one_square([0.5, 0.5]);
        spec.channels = 3;
        spec.shapes.push(SceneSpecTestShapes::ellipse());
        let (frames, masks) = render_sequence(&spec, 0).unwrap();
        assert_eq!(frames[0].channels(), 3);
        assert!(masks[0].ids().contains(&2));
        assert_eq!(spec.num_classes(), 3);
    }

    struct SceneSpecTestShapes;
    impl SceneSpecTestShapes {
        fn ellipse() -> ShapeSpec {
            ShapeSpec {
                geometry: Geometry::Ellipse { semi_axes: [5.0, 3.0] },
                class_id: 2,
                center: [22.0, 20.0],
                velocity: [-0.5, 0.0],
                angular_velocity_deg: 5.0,
            }
        }
    }
}
