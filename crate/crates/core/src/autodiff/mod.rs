//! Dense tensors, a recorded computation graph with reverse-mode
//! differentiation, and the optimiser used by every training loop.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_store, GradCheckReport};
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use optim::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig};
pub use params::{Binding, Param, ParamId, ParamStore, Snapshot};
pub use tensor::{matmul, Scalar, Tensor};


/// `c[m,n] += a[m,k] · b[k,n]` on raw row-major slices.
pub fn gemm<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    tensor::gemm_acc(a, b, c, m, k, n)
}
