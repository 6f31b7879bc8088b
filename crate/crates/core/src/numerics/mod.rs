//! Arrays, seeded randomness, tape-based differentiation and AdamW.

mod array;
mod gradcheck;
mod graph;
mod optim;
mod rng;

pub use array::NdArray;
pub use gradcheck::{finite_difference_grad, relative_error};
pub use graph::{Bind, Gradients, Graph, Param, ParamId, Var};
pub use optim::{adamw_step, AdamW, AdamWConfig};
pub use rng::{sample_standard_normal, Rng, RNG_ALGORITHM};

pub(crate) use graph::{nchw_to_rows, rows_to_nchw};
