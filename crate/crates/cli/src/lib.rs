//! Command-line front end for the federated segmentation simulator.

pub mod commands;
pub mod config;
pub mod manifest;
