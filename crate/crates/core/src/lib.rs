//! Reservoir operation toolkit: synthetic hydrology, a single-reservoir plant
//! with downstream routing, dynamic programming policies, a data-driven PID
//! inner loop and an economic MPC reference governor.

pub mod config;
pub mod dp;
pub mod empc;
pub mod error;
pub mod harness;
pub mod hydrology;
pub mod innerloop;
pub mod objectives;
pub mod plant;
pub mod reservoir;
pub mod routing;
pub mod vrft;

pub use error::{Error, Result};
