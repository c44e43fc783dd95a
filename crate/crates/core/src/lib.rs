//! Blind raw image denoising toolkit.
//!
//! Estimates Poisson-Gaussian noise parameters from a single Bayer frame
//! (coarse-to-fine), applies an expectation-matched variance-stabilizing
//! transform, denoises with a pluggable SNR-guided AWGN denoiser, and
//! validates the statistical machinery with built-in Monte Carlo harnesses.

pub mod cne;
pub mod denoise;
pub mod error;
pub mod filters;
pub mod metrics;
pub mod noise;
pub mod numeric;
pub mod pipeline;
pub mod raw;
pub mod synth;
pub mod validate;
pub mod vst;

pub use error::{Result, YondError};
pub use noise::{MVSample, MVSamples, NoiseParams, Stage};
pub use raw::{BayerImage, CfaPattern, NormalizedImage, PackedPlanes};
pub use vst::{BiasLut, LogGrid, LutStore, TransformContext};
