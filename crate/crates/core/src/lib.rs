//! Optimal synthetic sensor noise and sensor precision for privacy/utility
//! bounds on Kalman posterior covariance, with satellite-tracking scenarios.

pub mod orbital;
pub mod linalg;
pub mod kalman;
pub mod window;
pub mod lmi;
pub mod synthesis;
pub mod scenario;
