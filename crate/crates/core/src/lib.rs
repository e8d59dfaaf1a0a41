//! Selective visual-inertial odometry on synthetic sensor streams.
//!
//! Visual and inertial encoders feed a fusion stage (direct, soft or hard
//! masking) and a bidirectional recurrent model that regresses per-step
//! 6-DoF pose deltas.

pub mod binio;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod kv;
pub mod layers;
pub mod model;
pub mod odometry;
pub mod seed;
pub mod sim;
pub mod train;
pub mod window;

pub use error::{Result, SvioError};
