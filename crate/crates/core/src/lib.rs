//! Supporting Facts Network (SFN) for medical visual question answering.
//!
//! The crate covers the whole pipeline: parsing VQA-Med style question files,
//! dataset forensics and 19:1 resampling, inverse-frequency batch sampling,
//! the three input encoders, question-driven attention fusion, the frozen
//! question categorizer, the IF-1C baseline and the SFN multi-head reasoner,
//! staged transfer learning with checkpoints, and the evaluation metrics.
//!
//! A seeded synthetic generator ([`synthetic`]) stands in for the licensed
//! dataset so everything runs at desk scale. Runnable walkthroughs live in
//! `examples/`; the `sfn` binary exposes the same stages as subcommands.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod images;
pub mod metrics;
pub mod model;
pub mod nn;
mod plot;
pub mod reasoning;
pub mod rng;
pub mod sampling;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
