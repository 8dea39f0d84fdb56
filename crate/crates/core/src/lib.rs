//! Reward engineering toolkit for GRPO post-training of vision-language
//! models on physics question answering.
//!
//! The crate covers four reward families (format, accuracy, rubric and
//! attention grounding), group-relative advantages with a toy-policy
//! trainer, an LLM judge client, dataset labeling and an evaluation harness.

pub mod attention;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod judge;
pub mod plot;
pub mod rule_rewards;
pub mod scoring;
pub mod structured_output;

pub use error::{Error, Result};
