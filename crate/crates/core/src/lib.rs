//! Location-based side-channel analysis on simulated AES-128 leakage maps.
//!
//! The pipeline: simulate power/thermal maps ([`sim`]), persist them
//! ([`dataset`]), select points of interest ([`preprocess`]), train per-byte
//! classifiers with or without iterative transfer learning ([`attack`],
//! [`nn`]) and score attacks by key rank and measurements-to-disclosure
//! ([`keyrank`]).

pub mod aes;
pub mod attack;
pub mod dataset;
mod error;
pub mod exec;
pub mod keyrank;
pub mod nn;
pub mod preprocess;
pub mod sim;

pub use error::{Error, Result};
