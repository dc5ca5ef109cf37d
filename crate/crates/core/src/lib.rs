//! Metric learning with dynamically grown embedding subspaces, plus a
//! weakly supervised segmentation pipeline driven by the learned attention.

pub mod checkpoint;
pub mod config;
pub mod clustering;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod folder;
pub mod layout;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod plot;
pub mod synthetic;
pub mod trainer;
pub mod wss;

pub use error::{Error, Result};
