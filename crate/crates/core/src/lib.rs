//! Adaptive intermediate-domain training for multi-source retrieval
//! embeddings.
//!
//! The crate is organised bottom-up: [`tensor`] and [`tape`] provide dense
//! arithmetic with reverse-mode derivatives, [`synth`] generates labeled
//! multi-domain data, [`model`] holds the MLP backbone / embedding head /
//! classifier, [`msidg`] mixes per-domain feature statistics into
//! intermediate-domain features, [`losses`] and [`dfc`] provide the
//! objectives and the feedback controller, [`trainer`] runs the three
//! training stages and [`eval`] scores retrieval and clustering quality.

pub mod error;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result, TensorError};
pub use gradcheck::finite_diff_check;
pub use tape::{concat_rows, Gradients, Tape, Var};
pub use tensor::Tensor;

pub mod checkpoint;
pub mod dfc;
pub mod eval;
pub mod losses;
pub mod model;
pub mod msidg;
pub mod optim;
pub mod protocol;
pub mod rng;
pub mod synth;
pub mod trainer;
