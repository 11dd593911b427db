//! Dice metric, Wilcoxon signed-rank test and the evaluation protocol.

pub mod dice;
pub mod suite;
pub mod wilcoxon;

pub use dice::dice_score;
pub use suite::{evaluate_suite, ModelResult, SubjectScore, SuiteResult};
pub use wilcoxon::{wilcoxon_signed_rank, WilcoxonResult};
