//! Calibrated photometric stereo with Lambertian and Blinn-Phong
//! reflectance.
//!
//! The toolkit recovers per-pixel surface normals, diffuse albedo and
//! Blinn-Phong specular parameters from multi-illumination images. The
//! classical linear solve ([`pipeline::run_ps`]) provides the
//! initialisation for the nonlinear per-pixel fit ([`pipeline::run_bp`]),
//! which runs a regularising Levenberg-Marquardt scheme: damping chosen so
//! the linearised residual contracts by a fixed factor ρ per step, stopping
//! by the discrepancy principle at a noise level δ derived from a Gaussian
//! ball probability, with the local Scherzer constant monitored as a
//! convergence diagnostic.

pub mod blinn_phong;
pub mod dataset;
pub mod error;
pub mod lambertian;
pub mod noise;
pub mod pfm;
pub mod pipeline;
pub mod pyramid;
pub mod rlm;
pub mod synth;
pub mod types;

pub use error::{PsError, Result};
pub use noise::NoiseSpec;
pub use pipeline::{RunConfig, SolverModel};
pub use rlm::{RlmConfig, RlmResult, RlmStatus};
pub use types::{
    pixel_coordinates, Dataset, GrayImage, LightingConfig, Mask, NormalMapResult, ParamMap,
    PixelStatus, PixelUnknowns, ProjectionMode, ProjectionModel,
};
