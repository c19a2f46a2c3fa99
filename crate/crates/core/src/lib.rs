//! Asynchronous multi-LiDAR inertial odometry.

pub mod imu;
pub mod lie;
pub mod scan;
pub mod spline;
pub mod state;
pub mod uncertainty;
pub mod plane;
pub mod ieskf;
pub mod kdtree;
pub mod map;
pub mod config;
pub mod io;
pub mod odometry;
