//! Simulation and closed-form risk predictions for weak-to-strong training
//! of linear heads under spurious correlations.

pub mod config;
pub mod enhanced;
pub mod error;
pub mod geometry;
pub mod io;
pub mod ridgeless;
pub mod rng;
pub mod selfcheck;
pub mod sweep;
pub mod synth_data;
pub mod theory;

pub use config::{ExperimentConfig, GeometryTargets, ProblemConfig};
pub use error::{Error, Result};
pub use geometry::GroupGeometry;
pub use ridgeless::{Estimator, RiskReport};
pub use synth_data::{Dataset, FeatureMatrix, GroupMode, Role};
pub use theory::GainPrediction;
