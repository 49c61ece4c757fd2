//! Core library for a volumetric segmentation network built on grouped
//! state-space sequence mixing, gated cross-scale skip fusion, and
//! sample-routed expert blocks, together with the training stack (tape
//! autodiff, AdamW, cosine schedule), evaluation metrics, and a synthetic
//! data generator used by the command-line tools.

pub mod accept;
pub mod bench;
pub mod bridge;
pub mod conv;
pub mod error;
pub mod experts;
pub mod fault;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod mixer;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Caps the rayon pool from the M4FUSE_THREADS environment variable. Safe to
/// call more than once; later calls are no-ops.
pub fn init_thread_pool() {
    if let Ok(v) = std::env::var("M4FUSE_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
