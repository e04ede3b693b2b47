//! Tri-role multi-agent coordination at simulation scale.
//!
//! A lightweight head maps a representation vector to agent and role logits;
//! a coordinator runs multi-turn Thinker/Worker/Verifier episodes against a
//! pluggable agent pool (simulated or remote); budget-matched trainers
//! (sep-CMA-ES, random search, REINFORCE, supervised fitting) optimize the
//! head from binary episode rewards; and an analysis toolkit measures the
//! separability structure that makes diagonal evolution strategies effective
//! in this regime.

pub mod budget;
pub mod coordination;
pub mod heads;
pub mod par;
pub mod probe;
pub mod remote;
pub mod rng;
pub mod selection;
pub mod sepcma;
pub mod simenv;
pub mod stats;
pub mod theory;
pub mod trainers;

#[cfg(test)]
pub(crate) mod testutil;
