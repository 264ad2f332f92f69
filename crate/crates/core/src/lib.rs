//! Motion-flow propagation for sparsely annotated video.
//!
//! The crate estimates inter-frame motion by direct variational optimization,
//! refines intermediate flows under a cycle-consistency objective and jointly
//! propagates frame/label pairs so that every generated label stays aligned
//! with the frame it is paired with.
//!
//! Everything here is allocation-only `no_std`: file formats, threading and
//! the command line live in the `motionflow` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod cycle_compensator;
pub mod error;
pub mod flow_estimator;
pub mod imagecore;
pub mod losses;
pub mod metrics;
pub mod propagation;
pub mod synth;
pub mod warp;

mod descent;
mod math;

pub use error::{Error, Result};
pub use imagecore::{FlowField, Frame, LabelMask, Raster};
