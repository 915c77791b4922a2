use rayon::prelude::*;

use super::tensor::Tensor;
use crate::real::Real;

const ELEM_CHUNK: usize = 1 << 14;

/// `x ≥ 0 → x`, `x < 0 → slope·x`.
pub fn leaky_relu<T: Real>(input: &Tensor<T>, slope: T) -> Tensor<T> {
    let mut out = input.clone();
    out.data_mut().par_chunks_mut(ELEM_CHUNK).for_each(|c| {
        for v in c {
            if *v < T::zero() {
                *v *= slope;
            }
        }
    });
    out
}

/// Gradient through [`leaky_relu`]; the derivative at exactly 0 is 1.
pub fn leaky_relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>, slope: T) -> Tensor<T> {
    assert_eq!(input.shape(), grad_out.shape());
    let mut g = grad_out.clone();
    g.data_mut()
        .par_chunks_mut(ELEM_CHUNK)
        .zip(input.data().par_chunks(ELEM_CHUNK))
        .for_each(|(g, x)| {
            for (g, &x) in g.iter_mut().zip(x) {
                if x < T::zero() {
                    *g *= slope;
                }
            }
        });
    g
}
