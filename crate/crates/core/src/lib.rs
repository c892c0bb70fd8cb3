//! Adaptive block dropping for residual networks, with a guideline network
//! steering the per-sample drop ratio.

pub mod analysis;
pub mod backbone;
pub mod bmnet;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod network;
pub mod nn;
pub mod sgnet;
pub mod trainer;

pub use error::{Result, SgadError};
