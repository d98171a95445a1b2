//! Bilateral team formation for value-decomposition multi-agent learning.
//!
//! Agents score each other through masked attention, leaders and followers
//! are paired by a stable (deferred acceptance) or greedy matcher, and the
//! resulting teams condition a group-aware mixing network trained off-policy
//! on a small cooperative grid world.

pub mod attention;
pub mod config;
pub mod diffcore;
pub mod env;
pub mod error;
pub mod harness;
pub mod losses;
pub mod matching;
pub mod nets;
pub mod training;

pub use error::{Error, Result};
