//! Weakly-supervised prediction of vegetation stratum occupancy from
//! airborne LiDAR plots.
//!
//! A point-wise segmentation network is trained from three plot-level
//! occupancy ratios per plot (lower, medium and higher strata). Per-point
//! class probabilities are projected onto `K x K` occupancy rasters and
//! aggregated back to plot occupancies, which makes the whole chain
//! differentiable end to end. Two regularizers shape the rasters: a
//! two-component Gamma mixture fitted to point heights and a pixel entropy
//! penalty.
//!
//! The numeric core ([`gamma`], [`segnet`], [`raster`], [`losses`]) is generic
//! over the floating point type through [`Scalar`]. Training uses `f32`,
//! gradient checks use `f64`; concrete aliases are exported below.

pub mod baselines;
pub mod error;
pub mod gamma;
pub mod harness;
pub mod losses;
pub mod pointcloud;
pub mod raster;
pub mod scalar;
pub mod segnet;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Class order of the segmentation output.
pub const CLASS_NAMES: [&str; 4] = ["bare_soil", "low_veg", "medium_veg", "high_veg"];
/// Stratum names used in file names and CSV headers.
pub const STRATUM_NAMES: [&str; 3] = ["low", "medium", "high"];

pub type GammaComponent32 = gamma::GammaComponent<f32>;
pub type GammaComponent64 = gamma::GammaComponent<f64>;
pub type GammaMixture32 = gamma::GammaMixture<f32>;
pub type GammaMixture64 = gamma::GammaMixture<f64>;

pub type SegNet32 = segnet::SegNet<f32>;
pub type SegNet64 = segnet::SegNet<f64>;
pub type RegressionNet32 = segnet::RegressionNet<f32>;
pub type RegressionNet64 = segnet::RegressionNet<f64>;
pub type Adam32 = segnet::AdamState<f32>;
pub type Adam64 = segnet::AdamState<f64>;

pub type StratumRasterSet32 = raster::StratumRasterSet<f32>;
pub type StratumRasterSet64 = raster::StratumRasterSet<f64>;
