//! Dense optical flow hallucination from a single image, and its use as a
//! second stream for static-image action recognition.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`flow`]: displacement fields and the reversible `(sin, cos, magnitude)` encoding
//! - [`flow_io`]: `.flo` files, quantized flow images, color-wheel rendering
//! - [`synth`]: moving-shape scenes with analytic ground-truth flow
//! - [`model`]: the encoder-decoder flow network and its checkpoints
//! - [`classifier`]: the small convolutional classifier shared by the content
//!   network and both recognition streams
//! - [`training`]: pixel / content losses, gradient checks and the training loop
//! - [`metrics`]: EPE, direction and orientation similarity, Canny masks
//! - [`recognition`]: stream training, score fusion, nearest-neighbor baseline,
//!   motion-potential ranking
//! - [`pipeline`]: on-disk stages driven by the command line tool

pub mod checkpoint;
pub mod classifier;
pub mod flow;
pub mod flow_io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod recognition;
pub mod synth;
pub mod training;

pub use flow::{
    average_flows, decode_flow, encode_flow, flip_horizontal, motion_potential, EncodedFlow,
    FlowError, FlowField, Mask, MotionThresholds,
};
