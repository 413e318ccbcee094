//! Cross-tokenizer alignment of per-step top-k distributions.
//!
//! Two models with different tokenizers emit windowed next-token
//! distributions over the same text. [`pairing`] matches their token
//! sequences with a monotone dynamic program, [`transport`] moves each
//! paired source window onto the target window with Sinkhorn scaling, and
//! [`align`] assembles the fused target-side matrix. [`fusion`] holds the
//! training objective and a toy trainer; [`diag`] the embedding metrics.

pub mod align;
pub mod cli;
pub mod diag;
pub mod dist;
pub mod error;
pub mod fixtures;
pub mod fusion;
pub mod pairing;
pub mod transport;
pub mod vocab;

pub use align::{align_baseline, align_corpus, align_matrices, fuse_pipeline, AlignConfig, Strategy};
pub use dist::{DistributionMatrix, StepDistribution, ValueKind};
pub use error::{Error, Result};
pub use fusion::{Discrepancy, FusionConfig, FusionFunction, ToyModel};
pub use pairing::{brute_force_pairing, pair_tokens, token_cost, PairingResult};
pub use transport::{build_cost, exact_ot_2x2, extract_fused, sinkhorn, CostMatrix, OtConfig, TransportPlan};
pub use vocab::{TokenId, TokenSequence, Vocabulary};
