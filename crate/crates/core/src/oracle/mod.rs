//! Verification machinery independent of the transformation path: a reference
//! evaluator, exhaustive permutation search, and synthetic weight generators.

pub mod brute;
pub mod eval;
pub mod synthetic;

pub use brute::{brute_force_best_perm, permutation_difference, BRUTE_FORCE_ROW_LIMIT};
pub use eval::{compare_models, evaluate, max_relative_error, Activation, Equivalence, EvalInput};
pub use synthetic::{gen_synthetic, SyntheticSpec};
