//! Minimal feed-forward network engine used for both the generator and the detector.

pub mod checkpoint;
mod net;
mod optim;

pub use net::{
    cross_entropy, init_detector, init_generator, log_softmax, softmax, Dense, DenseGrad, DenseNet,
    ForwardCache, GradientBundle, Init, LayerNorm,
};
pub use optim::{step, AdamWConfig, OptimizerState};
