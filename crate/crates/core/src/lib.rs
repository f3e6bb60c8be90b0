//! Word-level language modelling as learning to rank.
//!
//! The crate builds top-k rank ground truths for every position of a
//! corpus, either from N-gram branching sets ([`rankgen`]) or from an
//! external teacher's saved predictions ([`teacherio`]), and trains a small
//! feedforward student ([`student`]) with Plackett-Luce, weak-order
//! Plackett-Luce, top-k KL and pairwise hinge objectives ([`loss`]).
//!
//! The pipeline, end to end:
//!
//! ```text
//! corpus.txt ──build_vocab──▶ Vocabulary ──load_corpus──▶ TokenStream
//!                                                            │
//!                     build_ranks / random_teacher / read_ranks
//!                                                            ▼
//!                                                    RankGroundTruth (RKGT)
//!                                                            │
//!          StudentParams ◀──train (combined_loss + Adam)─────┘
//!                │
//!                └──perplexity / topk_accuracy
//! ```

pub mod corpus;
pub mod eval;
pub mod loss;
pub mod num;
pub mod rankgen;
pub mod student;
pub mod synth;
pub mod teacherio;
pub mod trainer;

pub use corpus::{BatchPlan, TokenStream, Vocabulary};
pub use loss::{LossConfig, LossVariant};
pub use rankgen::{ContextSchema, OverflowMode, RankBuildConfig, RankGroundTruth};
pub use student::{StudentConfig, StudentParams};
pub use trainer::TrainConfig;

/// Token id used to pad rank rows past their length.
pub const PAD_ID: u32 = u32::MAX;
