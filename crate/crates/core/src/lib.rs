//! Scene synthesis, scene-aware expert routing and the flow-matching planner.

pub mod bench;
pub mod cmca;
pub mod dataset;
pub mod dse;
pub mod error;
pub mod eval;
pub mod flow;
pub mod moe;
pub mod nn;
pub mod par;
pub mod params;
pub mod planner;
pub mod scene;
pub mod theory;
pub mod train;
pub mod verify;

pub use error::{CoreError, Result};
