//! Desk-scale pipeline for learning microchannel flow fields: fractal
//! geometry generation, finite-difference ground-truth solves, and a small
//! NCHW autodiff stack with the encoder-decoder models built on it.

pub mod dataset;
pub mod det;
pub mod flowsolve;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod nnblocks;
pub mod tensor;
pub mod train;

/// Canvas height shared by every mask and field in the pipeline.
pub const GRID_H: usize = 128;
/// Canvas width shared by every mask and field in the pipeline.
pub const GRID_W: usize = 256;

/// Which channels a model learns to predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetMode {
    /// One channel: velocity magnitude over the reference velocity.
    Magnitude,
    /// Two channels: u and v over the reference velocity.
    Components,
}

impl TargetMode {
    pub fn channel_count(self) -> usize {
        match self {
            TargetMode::Magnitude => 1,
            TargetMode::Components => 2,
        }
    }
}

pub use flowsolve::{FlowField, SolveMode, SolverConfig};
pub use geometry::{ChannelProfile, ClosedCurve, ParamRanges, RasterMask, WmParams};
pub use tensor::{Mode, NodeId, ParamStore, Scalar, Shape, Tape, TensorError};
