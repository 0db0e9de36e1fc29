//! Online knowledge distillation with diverse peers.
//!
//! A group of `m` students (`m - 1` auxiliary peers plus one group leader)
//! trains simultaneously without a pre-trained teacher. Each peer distills
//! from its own attention-weighted aggregate of peer predictions, and the
//! leader distills from the plain peer average. Only the leader is kept for
//! inference.
//!
//! Everything runs on the small reverse-mode engine in [`autodiff`].

pub mod autodiff;
pub mod config;
pub mod data;
pub mod distillation;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod training;
pub mod verify;

mod error;

pub use error::{Error, Result};
