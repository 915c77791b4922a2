use rayon::prelude::*;

use super::linalg::{gemm_nn, gemm_nt, gemm_tn, ROW_CHUNK};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

fn check_shapes<T: Real>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    input.expect_rank("linear input", 2)?;
    weight.expect_rank("linear weight", 2)?;
    let (n, k) = (input.shape()[0], input.shape()[1]);
    let (m, k2) = (weight.shape()[0], weight.shape()[1]);
    if k != k2 {
        return Err(Error::shape("linear weight", &[m, k], weight.shape()));
    }
    Ok((n, k, m))
}

/// `output[n, o] = Σ_i input[n, i] · weight[o, i] + bias[o]`
pub fn linear<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k, m) = check_shapes(input, weight)?;
    bias.expect_shape("linear bias", &[m])?;
    let mut out = vec![T::zero(); n * m];
    out.par_chunks_mut(ROW_CHUNK * m)
        .zip(input.data().par_chunks(ROW_CHUNK * k))
        .for_each(|(o, x)| {
            let rows = x.len() / k;
            for row in o.chunks_exact_mut(m) {
                row.copy_from_slice(bias.data());
            }
            gemm_nt(rows, k, m, x, weight.data(), T::one(), o);
        });
    Tensor::new(&[n, m], out)
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<LinearGrads<T>> {
    let (n, k, m) = check_shapes(input, weight)?;
    grad_out.expect_shape("linear grad_out", &[n, m])?;

    let input_grad = if need_input_grad {
        let mut gi = vec![T::zero(); n * k];
        gi.par_chunks_mut(ROW_CHUNK * k)
            .zip(grad_out.data().par_chunks(ROW_CHUNK * m))
            .for_each(|(gi, g)| {
                let rows = g.len() / m;
                gemm_nn(rows, m, k, g, weight.data(), gi);
            });
        Some(Tensor::new(&[n, k], gi)?)
    } else {
        None
    };

    // Per-chunk partial sums reduced in chunk order.
    let partials: Vec<(Vec<T>, Vec<T>)> = grad_out
        .data()
        .par_chunks(ROW_CHUNK * m)
        .zip(input.data().par_chunks(ROW_CHUNK * k))
        .map(|(g, x)| {
            let rows = g.len() / m;
            let mut wg = vec![T::zero(); m * k];
            gemm_tn(rows, m, k, g, x, T::zero(), &mut wg);
            let mut bg = vec![T::zero(); m];
            for row in g.chunks_exact(m) {
                for (b, &v) in bg.iter_mut().zip(row) {
                    *b += v;
                }
            }
            (wg, bg)
        })
        .collect();

    let mut wg = vec![T::zero(); m * k];
    let mut bg = vec![T::zero(); m];
    for (pw, pb) in partials {
        wg.iter_mut().zip(pw).for_each(|(a, b)| *a += b);
        bg.iter_mut().zip(pb).for_each(|(a, b)| *a += b);
    }

    Ok(LinearGrads {
        input: input_grad,
        weight: Tensor::new(&[m, k], wg)?,
        bias: Tensor::new(&[m], bg)?,
    })
}
