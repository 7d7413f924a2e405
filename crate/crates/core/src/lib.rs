//! Video human-mesh recovery with dual-scan state-space blocks, at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: dense `f64` tensors on a define-by-run reverse-mode tape.
//! - [`ssm`]: ZOH discretization, recurrent/convolutional scans, selective scan.
//! - [`kinematics`]: kinematic tree, scan orders, forward kinematics, and the
//!   procedural skinned body used in place of a parametric body model.
//! - [`blocks`]: the network (dual-scan block, lifting stage, motion-guided
//!   reconstruction stage) expressed on the tape.
//! - [`losses`] and [`metrics`]: training objectives and evaluation metrics.
//! - [`synth`]: deterministic synthetic motion data and its on-disk container.

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod kinematics;
pub mod losses;
pub mod metrics;
pub mod ssm;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
