//! Command-line front end for fitting, testing and simulating.

pub mod app;
pub mod config;
pub mod dataset;
pub mod error;
pub mod output;
