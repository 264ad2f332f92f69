#![allow(dead_code)]

use motionflow_core::synth::{Geometry, SceneSpec, ShapeSpec};

/// Square and ellipse translating and rotating over a static background,
/// for `num_frames` frames at `speed` times the base rates.
pub fn two_shapes(num_frames: usize, speed: f64) -> SceneSpec {
    let mut square = ShapeSpec::square(1, [14.3, 20.4], 16.0, [0.6 * speed, 0.4 * speed]);
    square.angular_velocity_deg = 1.5 * speed;
    let ellipse = ShapeSpec {
        geometry: Geometry::Ellipse { semi_axes: [11.0, 8.0] },
        class_id: 2,
        center: [46.2, 45.7],
        velocity: [-0.5 * speed, -0.2 * speed],
        angular_velocity_deg: 2.0 * speed,
    };
    SceneSpec {
        width: 64,
        height: 64,
        num_frames,
        channels: 1,
        background_seed: 21,
        background_velocity: [0.0, 0.0],
        shapes: vec![square, ellipse],
        noise_sigma: 0.0,
    }
}

/// Larger, faster shapes for a single frame pair.
pub fn fast_pair() -> SceneSpec {
    let mut square = ShapeSpec::square(1, [20.3, 24.4], 22.0, [2.0, 1.0]);
    square.angular_velocity_deg = 6.0;
    let ellipse = ShapeSpec {
        geometry: Geometry::Ellipse { semi_axes: [12.0, 9.0] },
        class_id: 2,
        center: [45.2, 44.6],
        velocity: [-1.5, 0.5],
        angular_velocity_deg: -4.0,
    };
    SceneSpec {
        width: 64,
        height: 64,
        num_frames: 2,
        channels: 1,
        background_seed: 5,
        background_velocity: [0.0, 0.0],
        shapes: vec![square, ellipse],
        noise_sigma: 0.0,
    }
}
