//! Joint training of a review-comment generator (student) and a
//! code-refinement model (teacher) with cross-task distillation: the
//! student's predicted review distributions are fed to the teacher through
//! a differentiable bridge, so the teacher's refinement loss shapes the
//! student.

pub mod ablate;
pub mod autodiff;
pub mod corpus;
pub mod distill;
pub mod eval;
pub mod seq2seq;
pub mod tokenizer;
pub mod training;

pub use autodiff::{Elem, Tensor};
pub use corpus::{CorpusSplit, GrammarConfig, ReviewTriplet};
pub use seq2seq::{ModelConfig, Seq2Seq};
pub use tokenizer::Vocabulary;
