//! Agent runtime that discovers tools on demand, runs generated Python
//! against them through an authenticated bridge, anchors plans in an
//! external todo list, and freezes working scripts into versioned skills.

pub mod evalharness;
pub mod metrics;
pub mod orchestrator;
pub mod registry;
pub mod sandbox;
pub mod skillbank;
pub mod todos;
pub mod toolhost;

pub use orchestrator::{Runtime, RuntimeConfig};
