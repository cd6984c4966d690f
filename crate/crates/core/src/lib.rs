//! Self-supervised reconstruction of dynamic cine MRI, end to end on
//! synthetic phantoms: a complex-valued autodiff engine, Cartesian
//! undersampling, multi-coil encoding physics, unrolled complex UNets with
//! feature injection, self-supervised losses, training loops and metrics.

pub mod config;
pub mod container;
pub mod error;
pub mod eval;
pub mod export;
pub mod fft;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod mri;
pub mod phantom;
pub mod sampling;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::CTensor;
