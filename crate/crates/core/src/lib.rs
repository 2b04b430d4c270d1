//! Goal-conditioned DDPG with curiosity, PopArt critics, multi-criteria
//! hindsight replay and a staged curriculum, on a kinematic block-stacking
//! environment.

pub mod agent;
pub mod blockworld;
pub mod config;
pub mod curiosity;
pub mod error;
pub mod ndmath;
pub mod normalize;
pub mod replay;
pub mod trainer;

pub use error::{Error, Result};
