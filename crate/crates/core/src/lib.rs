//! Automatic short answer grading with large language models.
//!
//! The crate covers the whole offline pipeline: normalized datasets
//! ([`corpus`]), few-shot example selection by embedding distance
//! ([`embeddings`]), prompt assembly ([`prompting`]), completion backends
//! with response validation and regrading ([`llm`]), batch orchestration and
//! run persistence ([`engine`]), and accuracy statistics ([`eval`]).

pub mod corpus;
pub mod embeddings;
pub mod engine;
pub mod eval;
pub mod llm;
pub mod prompting;
pub mod rubric;

pub use corpus::{Dataset, Question, RawScore, ScoreScale, Submission};
pub use rubric::{Rubric, RubricItem};
