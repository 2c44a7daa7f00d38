//! Core of the pilotstack RC-car autopilot: a kinematic Ackermann simulator with a
//! synthetic forward camera, tub datasets, a from-scratch convolutional network and
//! the real-time drive loop that ties them together.

pub mod dataset;
pub mod drive;
mod error;
pub mod nn;
pub mod sim;

pub use error::{Error, Result};
