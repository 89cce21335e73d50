//! Manifest-frozen, replayable rule discovery over tabular evidence.
//!
//! An upper-level controller proposes bounded search directions and a
//! lower-level multi-objective evolutionary search over a bounded
//! conjunction grammar retains a Pareto frontier of (effect, support).
//! Only candidates passing the reporting predicate are exported, and every
//! export can be replayed on a frozen holdout partition.

pub mod adapters;
pub mod commands;
pub mod controller;
pub mod digest;
pub mod evidence;
pub mod manifest;
pub mod par;
pub mod report;
pub mod replay;
pub mod rule;
pub mod search;
