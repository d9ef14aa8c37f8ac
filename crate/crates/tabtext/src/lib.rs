//! Tabular-to-text clinical modeling toolkit.
//!
//! Converts tabular records into text renderings with exact variable span
//! bookkeeping, trains a compact transformer encoder on the resulting strings
//! (masked-language-model pretraining plus per-task fine-tuning), explains
//! predictions with integrated gradients aggregated to variable level, and
//! compares models with bootstrap confidence intervals and Welch t-tests.
//! A seeded synthetic emergency-department dataset generator with known
//! ground truth drives end-to-end runs without any restricted data.

pub mod attribution;
pub mod eval;
pub mod gbdt;
pub mod model;
pub mod synth;
pub mod tabular;
pub mod tensor;
pub mod train;
pub mod tokenizer;
