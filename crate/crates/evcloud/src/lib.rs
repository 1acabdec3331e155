//! Event-camera streams to point clouds, plus a small spatio-temporal point
//! network (hierarchical local feature extraction, temporal attention
//! aggregation, and a selective state-space sequence block) with its own
//! reverse-mode autodiff engine, trained end to end on the CPU.
//!
//! Layering, bottom to top:
//!
//! * [`tensor`]   dense row-major tensors, the gradient tape, Adam.
//! * [`events`]   event records, sliding windows, denoise, sampling,
//!                normalization into fixed-size point samples.
//! * [`geometry`] farthest point sampling, k-nearest-neighbor grouping,
//!                group standardization.
//! * [`ssm`]      zero-order-hold discretization and the selective scan.
//! * [`blocks`]   residual MLP blocks, local feature extraction, temporal
//!                attention aggregation, the Mamba-style sequence block.
//! * [`model`]    the staged network, checkpoints, parameter/FLOP counting.
//! * [`objectives`] losses and evaluation metrics.
//! * [`config`], [`dataset`], [`synth`], [`train`], [`bench`], [`cli`]
//!                the runnable harness around the library.

pub mod bench;
pub mod blocks;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod events;
pub mod geometry;
pub mod model;
pub mod objectives;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::Error;
