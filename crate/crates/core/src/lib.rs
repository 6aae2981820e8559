//! Abstention-aware question answering toolkit.
//!
//! The crate bundles the pieces needed to train and evaluate a policy that
//! must decide when to answer and when to refuse:
//!
//! - [`eval`]: judgment labels, multi-turn termination and truthfulness metrics.
//! - [`rewards`]: think/answer format parsing and the composite reward.
//! - [`grpo`]: group-relative advantages, clipped surrogate, KL to a reference
//!   policy and a deterministic trainer step.
//! - [`curriculum`]: easy/hard labeling, stage samplers and the staged schedule.
//! - [`synthenv`]: a synthetic latent-competence environment with closed-form
//!   and brute-force oracles.
//! - [`retrieval`] and [`ingest`]: lexical/dense hybrid ranking over chunks
//!   extracted from (mock) web search results.
//! - [`config`]: the sectioned run configuration used by the CLI.

pub mod config;
pub mod curriculum;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod ingest;
pub mod jsonl;
pub mod pipeline;
pub mod retrieval;
pub mod rewards;
pub mod service;
pub mod synthenv;

pub use error::{Error, Result};
