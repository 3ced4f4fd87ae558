//! Close-enough traveling salesman toolkit: disk geometry, a discretized
//! routing environment, an attention policy trained with REINFORCE, classical
//! insertion baselines and a dynamic replanning harness.

pub mod diffcore;
pub mod dynamic;
pub mod env;
pub mod error;
pub mod geometry;
pub mod heuristics;
pub mod instance;
pub mod par;
pub mod policy;
pub mod training;
