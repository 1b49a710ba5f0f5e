//! Generative sequence models of glucose outcomes and insulin treatments,
//! with the simulator, preprocessing, decision and evaluation code around them.

pub mod cohort;
mod container;
pub mod decision;
pub mod diffnum;
pub mod seqgen;
pub mod error;
pub mod eval;
pub mod preprocess;
pub mod rng;
pub mod trajectory;

pub use error::{Error, Result};
pub use trajectory::{Channels, Context, Event, EventKind, Grid, PatientRecord, Window, D, DEFAULT_K, P, V};
