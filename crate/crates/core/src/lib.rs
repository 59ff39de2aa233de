//! Compressive k-means from random Fourier sketches, with a simulated
//! optical co-processor for the projection step.
//!
//! Data are summarized by the empirical mean of a random feature map
//! `x ↦ exp(-i W x)`, and centroids are decoded from that single vector by
//! greedy matching pursuit with replacement. The projection `W x` can run on
//! a simulated binary-input optical device whose transmission matrix is
//! recovered by Hadamard probing, so the server can decode through a
//! differentiable twin of the device.

mod binio;
mod trig;

pub mod bounds;
pub mod calibration;
pub mod clomp;
pub mod data;
pub mod entropy;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nnls;
pub mod opu;
pub mod pipeline;
pub mod rff;
pub mod sketch;

pub use bounds::BoundingBox;
pub use calibration::{calibrate, make_device_map, make_twin_map, recover_transmission, CalibrationResult};
pub use clomp::{clomp_r, ClompOptions, MixtureModel};
pub use data::{gen_gmm, lloyd, LabeledDataset};
pub use entropy::{select_scale, EntropyReport};
pub use error::{Error, Result};
pub use metrics::{ami, empirical_risk, rse, wasserstein2, EvalReport, WeightMode};
pub use opu::OpuDevice;
pub use rff::{DeviceMap, ExplicitMap, FeatureMap, FrequencyFactors, Provenance, C64};
pub use sketch::{sketch_multiscale, sketch_stream, ScaleGrid, Sketch};
