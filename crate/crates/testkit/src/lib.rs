//! Verification harness shared by the test suites: finite-difference
//! gradient checks, brute-force reference implementations and fixtures.
//!
//! Checks return an [`Outcome`] instead of panicking so the acceptance run
//! can report every criterion, while ordinary tests simply `unwrap`.

// A NaN must fail `ensure!`, so negated comparisons are intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod fixtures;
pub mod gradcheck;
pub mod oracles;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use textstyle::tensor::Tensor;

/// Summary of one passing check family.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub instances: usize,
    /// Largest observed error under the check's own metric.
    pub worst: f64,
}

pub type Outcome = Result<Check, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(format!($($arg)*));
        }
    };
}
pub(crate) use ensure;

pub(crate) fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("non-empty shape")
}

pub(crate) fn err(e: textstyle::Error) -> String {
    e.to_string()
}
