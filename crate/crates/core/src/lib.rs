//! Measure how much local context a language model needs, detect sequences
//! that depend on long-range context, and correct short-context bias at
//! decode time. All analyses consume next-token distributions through the
//! [`oracle::Oracle`] trait, so they run unchanged against deterministic mocks
//! or a live inference server.

pub mod boosting;
pub mod corpus;
pub mod decoding;
pub mod detection;
pub mod dist;
pub mod oracle;
pub mod probe;
pub mod reporting;
pub mod seed;
pub mod textmetrics;

pub use decoding::DecodingStrategy;
pub use dist::{TokenDistribution, TokenId};
