//! Reasoning-oriented NER training toolkit.
//!
//! The crate covers the full algorithmic chain at desk scale:
//!
//! - structured (reasoning, entities) model outputs with canonical
//!   parsing and serialization ([`types`]);
//! - span-level micro P/R/F1, the composite reward, and corpus reports
//!   ([`scoring`]);
//! - the three-step CoT dataset pipeline with validation, consistency
//!   gating, and self-distillation ([`cot`]);
//! - capped stratified sampling over dataset manifests ([`sampling`]);
//! - a tabular autoregressive policy with exact gradients for the SFT
//!   objective ([`policy`]);
//! - Group Relative Policy Optimization over that policy ([`grpo`]),
//!   exercised on a synthetic micro-NER environment ([`micro_ner`]);
//! - a chat-completions gateway with retry and a scripted mock
//!   transport ([`gateway`]).

pub mod cot;
pub mod gateway;
pub mod grpo;
pub mod micro_ner;
pub mod policy;
pub mod sampling;
pub mod scoring;
pub mod types;

pub use scoring::{PrfCounts, RewardWeights};
pub use types::{EntityMention, EntitySchema, NerSample, ReasoningOutput};
