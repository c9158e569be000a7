//! Dense kernels, activations, optimizer, schedule and seeded sampling.
//!
//! Everything is `f64`, and every reduction runs in a fixed order so results
//! are bit-reproducible across runs.

mod matrix;
mod ops;
mod optim;
mod rng;

pub use matrix::{matmul, matmul_nt, matmul_tn, Matrix};
pub use ops::{
    gelu, gelu_from_tanh, gelu_grad, gelu_grad_from_tanh, gelu_tanh, layer_norm, layer_norm_backward, softmax_rows, softmax_rows_backward,
    LayerNormCache,
};
pub use optim::{cosine_lr, AdamW, AdamWState, ParamSlot};
pub use rng::{sample_normal, Rng};
