//! Simulation and feasibility analysis of battery-less, supercapacitor-powered
//! devices operating in TSCH networks.

pub mod calibration;
pub mod cli;
pub mod energy;
pub mod error;
pub mod feasibility;
pub mod join;
pub mod mac;
pub mod scenario;
pub mod sim;
pub mod strategies;

pub use error::{Error, Result};
