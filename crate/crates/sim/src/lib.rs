//! Synthetic multi-LiDAR/IMU datasets with exact ground truth, and
//! trajectory evaluation.

pub mod eval;
pub mod scenario;
pub mod synth;
pub mod trajectory;
pub mod world;

pub use eval::{evaluate, Metrics};
pub use scenario::Scenario;
pub use synth::write_dataset;
