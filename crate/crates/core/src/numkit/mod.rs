//! Dense matrix substrate: forward primitives and their analytic gradients.

mod backward;
mod matrix;
mod ops;

pub use backward::{
    backward, bias_add_backward, cosine_backward, l2_normalize_backward, matmul_backward,
    relu_backward, softmax_cross_entropy_backward, softmax_cross_entropy_indices,
    softmax_kl_backward, GradPair, OpKind, OpParams,
};
pub use matrix::{dot, matmul, matmul_nt, matmul_tn, norm, Matrix};
pub use ops::{
    bias_add, cosine_similarity_matrix, cross_entropy, kl_divergence_rows, l2_normalize_rows,
    relu, softmax_rows, Normalized, Similarity, NORM_EPS, PROB_FLOOR,
};
pub(crate) use ops::{safe_ln, softmax_in_place};
