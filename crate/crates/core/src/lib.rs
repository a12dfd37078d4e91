//! Probe-gradient reranking defence for dense-retriever pools.
//!
//! The crate turns per-pair probe-gradient signatures into two instability
//! penalties ([`signature`]), fuses them with a score gate into a defended
//! ranking ([`rerank`]), and ships a small differentiable retriever
//! ([`retriever`]), a synthetic corpus and poison generator ([`forge`]), a
//! Monte-Carlo model of the gradient mechanism ([`mechanism`]), exposure
//! metrics ([`metrics`]) and an experiment harness ([`harness`]).

pub mod error;
pub mod forge;
pub mod harness;
pub mod mechanism;
pub mod metrics;
pub mod retriever;
pub mod rerank;
pub mod seeding;
pub mod signature;

pub use error::{Error, ErrorKind, Result};
pub use rerank::{CandidatePool, DefendedRanking, Label, RerankConfig, ScoredCandidate, Variant};
pub use retriever::{PerturbationSpec, ProbeSpec, TinyEncoderParams, TokenSeq};
pub use signature::{GradientSignature, PairId, PenaltyBreakdown, PenaltyConfig, PerturbationKind};
