//! Dense matrices, a reverse-mode tape, and the optimiser used in training.

pub mod gradcheck;
mod kernel;
mod matrix;
mod optim;
mod tape;

pub use matrix::Matrix;
pub use optim::Adam;
pub use tape::{
    cross_entropy, gcn_normalize, pair_count, pair_index, row_softmax, Gradients, Tape, Var,
    LOG_EPSILON,
};
