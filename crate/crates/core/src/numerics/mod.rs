//! Dense tensors, the autodiff tape and the finite-difference oracle.

mod graph;
mod tensor;

pub use graph::{AttentionRecord, AttnMask, Gradients, Graph, OpKind, SoftTarget, Var, PROB_FLOOR};
pub use tensor::{interpolate_linear_1d, layer_norm, matmul, softmax_lastdim, Tensor};

use crate::scalar::Scalar;

/// Central finite-difference step for `f32` evaluation.
pub const FD_STEP_F32: f64 = 1e-3;
/// Central finite-difference step for the `f64` shadow mode.
pub const FD_STEP_F64: f64 = 1e-5;

/// Central-difference gradient of a scalar function, one element at a time.
///
/// The difference quotient is formed in `f64` regardless of `T`.
pub fn finite_diff_gradient<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    step: f64,
) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let plus = T::lit(orig.to_f64_lossless() + step);
        let minus = T::lit(orig.to_f64_lossless() - step);
        probe.data_mut()[i] = plus;
        let fp = f(&probe).to_f64_lossless();
        probe.data_mut()[i] = minus;
        let fm = f(&probe).to_f64_lossless();
        probe.data_mut()[i] = orig;
        let h = plus.to_f64_lossless() - minus.to_f64_lossless();
        out.push((fp - fm) / h);
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Largest elementwise relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
