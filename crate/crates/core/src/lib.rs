//! Asynchronous stereo event-camera 3D object detection at desk scale.

pub mod backbone;
pub mod boxes;
pub mod detector;
pub mod dual_filter;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod harness;
pub mod event;
pub mod losses;
pub mod model;
pub mod nn;
pub mod par;
pub mod stereo;
pub mod synth;
pub mod targets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
