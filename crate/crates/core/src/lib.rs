//! Policy-driven document-grounded dialogue toolkit.
//!
//! The pipeline: a corpus of dialogues grounded in topic-tagged knowledge
//! sentences is annotated with a dialogue policy (utterance function +
//! topic-transfer intent), a planner model selects the grounding sentence
//! via span prediction with sentence snapping and predicts the response
//! policy, and a generator decodes the response with policy-conditioned
//! cross-attention bias. The two models can then be trained jointly with
//! a policy-gradient step rewarded by generation quality.

pub mod corpus;
pub mod nn;
pub mod planner;
pub mod generator;
pub mod error;
pub mod tokenizer;

pub use error::{Error, Result};
