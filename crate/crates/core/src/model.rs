//! The correspondence network: a pointwise coordinate MLP (coarse module)
//! followed by a two-layer residual 3D CNN (smoothing module).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::diff::linalg::{gemm_nn, gemm_nt, gemm_tn, ROW_CHUNK};
use crate::diff::{adam_step, conv3d, conv3d_backward, leaky_relu, leaky_relu_backward, AdamState, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::Grid;

/// Number of linear layers in the coarse module.
pub const CCM_LAYERS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_width: usize,
    pub sm_channels: usize,
    pub activation_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_width: 128,
            sm_channels: 16,
            activation_slope: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 || self.sm_channels == 0 {
            return Err(Error::InvalidArgument(
                "hidden_width and sm_channels must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.activation_slope) {
            return Err(Error::InvalidArgument(format!(
                "activation_slope must lie in [0, 1), got {}",
                self.activation_slope
            )));
        }
        Ok(())
    }
}

/// Trainable tensor with its gradient accumulator and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub adam: AdamState<T>,
}

impl<T: Real> Param<T> {
    fn new(name: String, value: Tensor<T>) -> Self {
        let n = value.len();
        Param {
            name,
            value,
            grad: vec![T::zero(); n],
            adam: AdamState::new(n),
        }
    }

    fn accumulate(&mut self, g: &Tensor<T>) {
        debug_assert_eq!(g.len(), self.grad.len());
        self.grad.iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcmParams<T> {
    pub layers: Vec<Layer<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmParams<T> {
    pub conv1: Layer<T>,
    pub conv2: Layer<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub ccm: CcmParams<T>,
    pub sm: SmParams<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for l in self.ccm.layers.iter().chain([&self.sm.conv1, &self.sm.conv2]) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for l in self
            .ccm
            .layers
            .iter_mut()
            .chain([&mut self.sm.conv1, &mut self.sm.conv2])
        {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn adam_update(&mut self, lr: f64) -> Result<()> {
        for p in self.params_mut() {
            adam_step(&p.name, p.value.data_mut(), &p.grad, &mut p.adam, lr)?;
        }
        Ok(())
    }
}

/// Closed-form trainable parameter count.
pub fn count_params(config: &ModelConfig) -> usize {
    let h = config.hidden_width;
    let c = config.sm_channels;
    let ccm = (3 * h + h) + 3 * (h * h + h) + (3 * h + 3);
    let sm = (3 * c * 27 + c) + (c * 3 * 27 + 3);
    ccm + sm
}

fn uniform_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

/// Hidden layers draw weights and biases from `U(-1/√fan_in, 1/√fan_in)`;
/// the last layer of each module starts at zero so the initial offset field
/// is exactly zero.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.hidden_width;
    let c = config.sm_channels;

    let dims = [(3, h), (h, h), (h, h), (h, h), (h, 3)];
    let layers = dims
        .iter()
        .enumerate()
        .map(|(i, &(fan_in, fan_out))| {
            let (w, b) = if i + 1 == CCM_LAYERS {
                (Tensor::zeros(&[fan_out, fan_in]), Tensor::zeros(&[fan_out]))
            } else {
                let bound = (1.0 / fan_in as f64).sqrt();
                (
                    uniform_tensor(&mut rng, &[fan_out, fan_in], bound),
                    uniform_tensor(&mut rng, &[fan_out], bound),
                )
            };
            Layer {
                weight: Param::new(format!("ccm.{i}.weight"), w),
                bias: Param::new(format!("ccm.{i}.bias"), b),
            }
        })
        .collect();

    let bound = (1.0f64 / 81.0).sqrt();
    let conv1 = Layer {
        weight: Param::new(
            "sm.conv1.weight".into(),
            uniform_tensor(&mut rng, &[c, 3, 3, 3, 3], bound),
        ),
        bias: Param::new("sm.conv1.bias".into(), uniform_tensor(&mut rng, &[c], bound)),
    };
    let conv2 = Layer {
        weight: Param::new("sm.conv2.weight".into(), Tensor::zeros(&[3, c, 3, 3, 3])),
        bias: Param::new("sm.conv2.bias".into(), Tensor::zeros(&[3])),
    };

    Ok(ModelParams {
        config: *config,
        ccm: CcmParams { layers },
        sm: SmParams { conv1, conv2 },
    })
}

#[derive(Debug, Clone)]
pub struct CcmCache<T> {
    points: Tensor<T>,
    /// Pre-activation output of each hidden layer, `[N, width]`. The
    /// activations are recomputed from these during the backward pass.
    pre: Vec<Vec<T>>,
}

fn activate_into<T: Real>(z: &[T], slope: T, out: &mut Vec<T>) {
    out.clear();
    out.extend(z.iter().map(|&v| if v < T::zero() { v * slope } else { v }));
}

fn layer_dims<T: Real>(layer: &Layer<T>) -> (usize, usize) {
    let s = layer.weight.value.shape();
    (s[0], s[1])
}

/// Runs each block of `ROW_CHUNK` points through every layer before moving
/// on, so intermediate activations stay cache resident.
fn ccm_forward_cached<T: Real>(
    params: &CcmParams<T>,
    slope: T,
    points: &Tensor<T>,
) -> Result<(Tensor<T>, CcmCache<T>)> {
    points.expect_rank("ccm input", 2)?;
    let n = points.shape()[0];
    if points.shape()[1] != 3 {
        return Err(Error::shape("ccm input", &[n, 3], points.shape()));
    }
    let layers = &params.layers;
    let hidden = layers.len() - 1;
    let out_w = layer_dims(&layers[hidden]).0;
    let mut pre: Vec<Vec<T>> = layers[..hidden]
        .iter()
        .map(|l| vec![T::zero(); n * layer_dims(l).0])
        .collect();
    let mut out = vec![T::zero(); n * out_w];

    let mut pre_iters: Vec<_> = pre
        .iter_mut()
        .zip(layers)
        .map(|(v, l)| v.chunks_mut(ROW_CHUNK * layer_dims(l).0))
        .collect();
    let tasks: Vec<_> = out
        .chunks_mut(ROW_CHUNK * out_w)
        .zip(points.data().chunks(ROW_CHUNK * 3))
        .map(|(o, x)| {
            let zs: Vec<&mut [T]> = pre_iters.iter_mut().map(|it| it.next().expect("chunk")).collect();
            (zs, o, x)
        })
        .collect();

    tasks.into_par_iter().for_each(|(mut zs, o, x)| {
        let rows = x.len() / 3;
        let mut a = x.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            let (m, k) = layer_dims(layer);
            let z: &mut [T] = if i < hidden { &mut *zs[i] } else { &mut *o };
            for row in z.chunks_exact_mut(m) {
                row.copy_from_slice(layer.bias.value.data());
            }
            gemm_nt(rows, k, m, &a, layer.weight.value.data(), T::one(), z);
            if i < hidden {
                activate_into(z, slope, &mut a);
            }
        }
    });

    Ok((
        Tensor::new(&[n, out_w], out)?,
        CcmCache {
            points: points.clone(),
            pre,
        },
    ))
}

/// Coarse offsets `[N, 3]` for a batch of normalized coordinates `[N, 3]`.
pub fn ccm_forward<T: Real>(params: &ModelParams<T>, points: &Tensor<T>) -> Result<Tensor<T>> {
    let slope = T::lit(params.config.activation_slope);
    Ok(ccm_forward_cached(&params.ccm, slope, points)?.0)
}

fn ccm_backward<T: Real>(
    params: &mut CcmParams<T>,
    slope: T,
    cache: &CcmCache<T>,
    grad_out: Tensor<T>,
) -> Result<()> {
    let layers = &params.layers;
    let hidden = layers.len() - 1;
    let out_w = layer_dims(&layers[hidden]).0;
    let n = cache.points.shape()[0];
    grad_out.expect_shape("ccm grad", &[n, out_w])?;

    let chunks = n.div_ceil(ROW_CHUNK);
    // Per-chunk (weight, bias) gradients for every layer, summed afterwards
    // in chunk order so the result does not depend on scheduling.
    let partials: Vec<Vec<(Vec<T>, Vec<T>)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * ROW_CHUNK;
            let rows = ROW_CHUNK.min(n - lo);
            let x = &cache.points.data()[lo * 3..(lo + rows) * 3];
            let mut g = grad_out.data()[lo * out_w..(lo + rows) * out_w].to_vec();
            let mut a = Vec::new();
            let mut gi = Vec::new();
            let mut grads = vec![(Vec::new(), Vec::new()); layers.len()];
            for i in (0..layers.len()).rev() {
                let (m, k) = layer_dims(&layers[i]);
                let z_prev = (i > 0).then(|| &cache.pre[i - 1][lo * k..(lo + rows) * k]);
                let input: &[T] = match z_prev {
                    Some(z) => {
                        activate_into(z, slope, &mut a);
                        &a
                    }
                    None => x,
                };
                let mut wg = vec![T::zero(); m * k];
                gemm_tn(rows, m, k, &g, input, T::zero(), &mut wg);
                let mut bg = vec![T::zero(); m];
                for row in g.chunks_exact(m) {
                    bg.iter_mut().zip(row).for_each(|(b, &v)| *b += v);
                }
                grads[i] = (wg, bg);
                if let Some(z) = z_prev {
                    gi.clear();
                    gi.resize(rows * k, T::zero());
                    gemm_nn(rows, m, k, &g, layers[i].weight.value.data(), &mut gi);
                    gi.iter_mut().zip(z).for_each(|(g, &z)| {
                        if z < T::zero() {
                            *g *= slope;
                        }
                    });
                    std::mem::swap(&mut g, &mut gi);
                }
            }
            grads
        })
        .collect();

    for chunk in partials {
        for (layer, (wg, bg)) in params.layers.iter_mut().zip(chunk) {
            layer.weight.grad.iter_mut().zip(wg).for_each(|(a, b)| *a += b);
            layer.bias.grad.iter_mut().zip(bg).for_each(|(a, b)| *a += b);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SmCache<T> {
    coarse: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
}

fn sm_forward_cached<T: Real>(
    params: &SmParams<T>,
    slope: T,
    coarse: &Tensor<T>,
) -> Result<(Tensor<T>, SmCache<T>)> {
    coarse.expect_rank("sm input", 4)?;
    if coarse.shape()[0] != 3 {
        return Err(Error::InvalidArgument(format!(
            "sm input must have 3 channels, got shape {:?}",
            coarse.shape()
        )));
    }
    let pre = conv3d(coarse, &params.conv1.weight.value, &params.conv1.bias.value)?;
    let act = leaky_relu(&pre, slope);
    let mut out = conv3d(&act, &params.conv2.weight.value, &params.conv2.bias.value)?;
    out.data_mut()
        .iter_mut()
        .zip(coarse.data())
        .for_each(|(o, &c)| *o += c);
    Ok((
        out,
        SmCache {
            coarse: coarse.clone(),
            pre,
            act,
        },
    ))
}

/// Residual smoothing: `coarse + conv2(leaky_relu(conv1(coarse)))`.
pub fn sm_forward<T: Real>(params: &ModelParams<T>, coarse: &Tensor<T>) -> Result<Tensor<T>> {
    let slope = T::lit(params.config.activation_slope);
    Ok(sm_forward_cached(&params.sm, slope, coarse)?.0)
}

fn sm_backward<T: Real>(
    params: &mut SmParams<T>,
    slope: T,
    cache: &SmCache<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g2 = conv3d_backward(&cache.act, &params.conv2.weight.value, grad_out, true)?;
    params.conv2.weight.accumulate(&g2.weight);
    params.conv2.bias.accumulate(&g2.bias);
    let g_act = g2.input.expect("requested");
    let g_pre = leaky_relu_backward(&cache.pre, &g_act, slope);
    let g1 = conv3d_backward(&cache.coarse, &params.conv1.weight.value, &g_pre, true)?;
    params.conv1.weight.accumulate(&g1.weight);
    params.conv1.bias.accumulate(&g1.bias);
    let mut g_coarse = g1.input.expect("requested");
    g_coarse
        .data_mut()
        .iter_mut()
        .zip(grad_out.data())
        .for_each(|(a, &b)| *a += b);
    Ok(g_coarse)
}

fn grid_tensor<T: Real>(grid: &Grid<T>) -> Tensor<T> {
    let d = grid.dims();
    Tensor::new(&[3, d.w(), d.h(), d.d()], grid.coords().to_vec()).expect("grid shape")
}

/// Activations kept from a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    /// Offset field `[3, W, H, D]` in normalized units.
    pub offset: Tensor<T>,
    /// Correspondence field `grid + offset`, unclamped.
    pub phi: Tensor<T>,
    ccm: CcmCache<T>,
    sm: SmCache<T>,
}

pub fn ncf_forward_train<T: Real>(params: &ModelParams<T>, grid: &Grid<T>) -> Result<ForwardPass<T>> {
    let d = grid.dims();
    let n = d.len();
    let slope = T::lit(params.config.activation_slope);
    let points = Tensor::new(&[n, 3], grid.to_points())?;
    let (coarse_pts, ccm) = ccm_forward_cached(&params.ccm, slope, &points)?;
    let coarse = coarse_pts.transpose2().reshape(&[3, d.w(), d.h(), d.d()])?;
    let (offset, sm) = sm_forward_cached(&params.sm, slope, &coarse)?;
    let mut phi = grid_tensor(grid);
    phi.data_mut()
        .iter_mut()
        .zip(offset.data())
        .for_each(|(p, &o)| *p += o);
    Ok(ForwardPass { offset, phi, ccm, sm })
}

/// Offset field and correspondence field for `grid`.
pub fn ncf_forward<T: Real>(params: &ModelParams<T>, grid: &Grid<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let pass = ncf_forward_train(params, grid)?;
    Ok((pass.offset, pass.phi))
}

/// Accumulates parameter gradients given `dL/dphi` (equal to `dL/doffset`).
pub fn ncf_backward<T: Real>(
    params: &mut ModelParams<T>,
    pass: &ForwardPass<T>,
    grad_phi: &Tensor<T>,
) -> Result<()> {
    grad_phi.expect_shape("ncf grad", pass.phi.shape())?;
    let slope = T::lit(params.config.activation_slope);
    let g_coarse = sm_backward(&mut params.sm, slope, &pass.sm, grad_phi)?;
    let n = g_coarse.len() / 3;
    let g_points = g_coarse.reshape(&[3, n])?.transpose2();
    ccm_backward(&mut params.ccm, slope, &pass.ccm, g_points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{make_grid, Dims};

    fn small() -> ModelConfig {
        ModelConfig {
            hidden_width: 6,
            sm_channels: 2,
            activation_slope: 0.01,
        }
    }

    #[test]
    fn fused_coarse_module_matches_layer_composition() {
        use crate::diff::{linear, linear_backward};
        let cfg = ModelConfig { hidden_width: 5, sm_channels: 2, activation_slope: 0.1 };
        let mut params = init_params::<f64>(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in params.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.8..0.8));
        }
        let n = ROW_CHUNK + 300;
        let points = Tensor::from_fn(&[n, 3], |i| ((i * 37 % 101) as f64 / 50.0) - 1.0);
        let g_out = Tensor::from_fn(&[n, 3], |i| ((i * 13 % 7) as f64 - 3.0) / 10.0);
        let slope = 0.1;

        let mut inputs = vec![points.clone()];
        let mut pre = Vec::new();
        let mut y = None;
        for (i, l) in params.ccm.layers.iter().enumerate() {
            let z = linear(&inputs[i], &l.weight.value, &l.bias.value).unwrap();
            if i + 1 == CCM_LAYERS {
                y = Some(z);
            } else {
                inputs.push(leaky_relu(&z, slope));
                pre.push(z);
            }
        }
        let y = y.unwrap();
        let (fused, cache) = ccm_forward_cached(&params.ccm, slope, &points).unwrap();
        assert!(fused.data().iter().zip(y.data()).all(|(a, b)| (a - b).abs() < 1e-12));

        let mut expect = Vec::new();
        let mut g = g_out.clone();
        for i in (0..CCM_LAYERS).rev() {
            let l = &params.ccm.layers[i];
            let gr = linear_backward(&inputs[i], &l.weight.value, &g, i > 0).unwrap();
            expect.push((i, gr.weight, gr.bias));
            if let Some(gi) = gr.input {
                g = leaky_relu_backward(&pre[i - 1], &gi, slope);
            }
        }
        params.zero_grad();
        ccm_backward(&mut params.ccm, slope, &cache, g_out).unwrap();
        for (i, w, b) in expect {
            let l = &params.ccm.layers[i];
            assert!(l.weight.grad.iter().zip(w.data()).all(|(a, b)| (a - b).abs() < 1e-9));
            assert!(l.bias.grad.iter().zip(b.data()).all(|(a, b)| (a - b).abs() < 1e-9));
        }
    }

    #[test]
    fn default_count_is_53046() {
        assert_eq!(count_params(&ModelConfig::default()), 53_046);
        let p = init_params::<f32>(&ModelConfig::default(), 0).unwrap();
        assert_eq!(p.num_params(), 53_046);
    }

    #[test]
    fn unit_widths_count() {
        let c = ModelConfig {
            hidden_width: 1,
            sm_channels: 1,
            activation_slope: 0.01,
        };
        assert_eq!(count_params(&c), 182);
        assert_eq!(init_params::<f64>(&c, 3).unwrap().num_params(), 182);
    }

    #[test]
    fn count_formula_matches_allocation() {
        for h in [1, 2, 5, 17] {
            for c in [1, 3, 8] {
                let cfg = ModelConfig {
                    hidden_width: h,
                    sm_channels: c,
                    activation_slope: 0.1,
                };
                assert_eq!(count_params(&cfg), init_params::<f64>(&cfg, 1).unwrap().num_params());
            }
        }
    }

    #[test]
    fn doubling_width_roughly_quadruples_ccm() {
        let ccm = |h: usize| {
            count_params(&ModelConfig {
                hidden_width: h,
                sm_channels: 1,
                activation_slope: 0.0,
            }) - 166
        };
        let r = ccm(256) as f64 / ccm(128) as f64;
        assert!((3.8..4.1).contains(&r), "ratio {r}");
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let a = init_params::<f32>(&small(), 42).unwrap();
        let b = init_params::<f32>(&small(), 42).unwrap();
        let c = init_params::<f32>(&small(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.ccm.layers[0].weight.value, c.ccm.layers[0].weight.value);
    }

    #[test]
    fn fresh_params_give_identity_field() {
        let p = init_params::<f64>(&small(), 9).unwrap();
        let grid = make_grid::<f64>(Dims::new(4, 3, 5).unwrap());
        let (offset, phi) = ncf_forward(&p, &grid).unwrap();
        assert!(offset.data().iter().all(|&v| v == 0.0));
        assert_eq!(phi.data(), grid.coords());
    }

    #[test]
    fn zero_conv2_makes_sm_identity() {
        let p = init_params::<f64>(&small(), 1).unwrap();
        let coarse = Tensor::from_fn(&[3, 4, 4, 3], |i| (i as f64 * 0.13).sin());
        assert_eq!(sm_forward(&p, &coarse).unwrap(), coarse);
    }

    #[test]
    fn bad_slope_is_rejected() {
        let mut c = small();
        c.activation_slope = 1.0;
        assert!(init_params::<f64>(&c, 0).is_err());
    }
}
