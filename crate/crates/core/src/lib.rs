pub mod baseline;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod joint_cost;
pub mod model;
pub mod ot_core;
pub mod pseudo_label;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
