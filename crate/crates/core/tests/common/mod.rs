//! Finite-difference gradient checks shared by the gradient suite and the
//! acceptance runner. Everything here runs in `f64`.

#![allow(dead_code)]

use ncf_core::diff::*;
use ncf_core::losses::*;
use ncf_core::model::*;
use ncf_core::volume::make_grid;
use ncf_core::Dims;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;

/// Largest absolute deviation between `analytic` and central differences of
/// `f` at `x0`, relative to the largest gradient magnitude seen.
pub fn fd_rel_error(analytic: &[f64], x0: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(analytic.len(), x0.len());
    let mut x = x0.to_vec();
    let mut err: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for i in 0..x.len() {
        x[i] = x0[i] + FD_STEP;
        let fp = f(&x);
        x[i] = x0[i] - FD_STEP;
        let fm = f(&x);
        x[i] = x0[i];
        let fd = (fp - fm) / (2.0 * FD_STEP);
        err = err.max((fd - analytic[i]).abs());
        scale = scale.max(fd.abs()).max(analytic[i].abs());
    }
    if scale == 0.0 {
        err
    } else {
        err / scale
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn with_data(t: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    Tensor::new(t.shape(), data.to_vec()).unwrap()
}

/// Normalized coordinates `[3, W', H', D']` that stay at least 0.1 voxel
/// away from every knot of a `target` volume, where trilinear weights kink.
pub fn off_knot_coords(rng: &mut ChaCha8Rng, out: Dims, target: Dims) -> Tensor<f64> {
    let n = out.len();
    let mut data = vec![0.0; 3 * n];
    for a in 0..3 {
        let s = target.0[a] as f64;
        for p in 0..n {
            let cell = rng.gen_range(0..target.0[a] - 1) as f64;
            let t = cell + rng.gen_range(0.1..0.9);
            data[a * n + p] = 2.0 * t / (s - 1.0) - 1.0;
        }
    }
    Tensor::new(&[3, out.w(), out.h(), out.d()], data).unwrap()
}

/// Smooth test image with values inside `[0, 1]`.
pub fn smooth_image(dims: Dims, phase: f64) -> Tensor<f64> {
    Tensor::from_fn(&dims.as_vec(), |i| {
        let [x, y, z] = dims.coords(i).map(|v| v as f64);
        0.5 + 0.2 * (0.9 * x + phase).sin() * (0.7 * y - phase).cos() + 0.15 * (0.8 * z + 0.3 * x + phase).sin()
    })
}

/// Relative error of every differentiable kernel, one entry per checked
/// gradient.
pub fn kernel_gradient_checks() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut r = rng(1);

    // Dense layer.
    let x = uniform(&mut r, &[4, 3], -1.0, 1.0);
    let w = uniform(&mut r, &[5, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[5], -1.0, 1.0);
    let go = uniform(&mut r, &[4, 5], -1.0, 1.0);
    let g = linear_backward(&x, &w, &go, true).unwrap();
    let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(linear(x, w, b).unwrap().data(), go.data());
    out.push(("linear/input", fd_rel_error(g.input.as_ref().unwrap().data(), x.data(), |v| loss(&with_data(&x, v), &w, &b))));
    out.push(("linear/weight", fd_rel_error(g.weight.data(), w.data(), |v| loss(&x, &with_data(&w, v), &b))));
    out.push(("linear/bias", fd_rel_error(g.bias.data(), b.data(), |v| loss(&x, &w, &with_data(&b, v)))));

    // Activation, away from the kink.
    let x = Tensor::from_fn(&[12], |i| if i % 2 == 0 { 0.3 + i as f64 * 0.1 } else { -0.2 - i as f64 * 0.1 });
    let go = uniform(&mut r, &[12], -1.0, 1.0);
    let gi = leaky_relu_backward(&x, &go, 0.01);
    out.push((
        "leaky_relu",
        fd_rel_error(gi.data(), x.data(), |v| dot(leaky_relu(&with_data(&x, v), 0.01).data(), go.data())),
    ));

    // Convolution, narrow and wide output (both code paths).
    for (name_in, name_w, name_b, cout) in [
        ("conv3d/input", "conv3d/weight", "conv3d/bias", 2usize),
        ("conv3d_wide/input", "conv3d_wide/weight", "conv3d_wide/bias", 9),
    ] {
        let x = uniform(&mut r, &[2, 4, 3, 3], -1.0, 1.0);
        let w = uniform(&mut r, &[cout, 2, 3, 3, 3], -1.0, 1.0);
        let b = uniform(&mut r, &[cout], -1.0, 1.0);
        let go = uniform(&mut r, &[cout, 4, 3, 3], -1.0, 1.0);
        let g = conv3d_backward(&x, &w, &go, true).unwrap();
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(conv3d(x, w, b).unwrap().data(), go.data());
        out.push((name_in, fd_rel_error(g.input.as_ref().unwrap().data(), x.data(), |v| loss(&with_data(&x, v), &w, &b))));
        out.push((name_w, fd_rel_error(g.weight.data(), w.data(), |v| loss(&x, &with_data(&w, v), &b))));
        out.push((name_b, fd_rel_error(g.bias.data(), b.data(), |v| loss(&x, &w, &with_data(&b, v)))));
    }

    // Trilinear sampling.
    let vd = Dims::new(5, 4, 3).unwrap();
    let vol = uniform(&mut r, &vd.as_vec(), 0.0, 1.0);
    let coords = off_knot_coords(&mut r, Dims::new(3, 3, 2).unwrap(), vd);
    let go = uniform(&mut r, &[3, 3, 2], -1.0, 1.0);
    let g = trilinear_sample_backward(&vol, &coords, &go, true).unwrap();
    out.push((
        "trilinear_sample/coords",
        fd_rel_error(g.coords.data(), coords.data(), |v| {
            dot(trilinear_sample(&vol, &with_data(&coords, v)).unwrap().data(), go.data())
        }),
    ));
    out.push((
        "trilinear_sample/volume",
        fd_rel_error(g.volume.as_ref().unwrap().data(), vol.data(), |v| {
            dot(trilinear_sample(&with_data(&vol, v), &coords).unwrap().data(), go.data())
        }),
    ));

    // Trilinear splatting.
    let coords = off_knot_coords(&mut r, Dims::new(4, 3, 2).unwrap(), vd);
    let go = uniform(&mut r, &vd.as_vec(), -1.0, 1.0);
    let g = trilinear_splat_backward(&coords, vd, &go).unwrap();
    out.push((
        "trilinear_splat/coords",
        fd_rel_error(g.data(), coords.data(), |v| {
            dot(trilinear_splat(&with_data(&coords, v), vd).unwrap().data(), go.data())
        }),
    ));

    // SSIM map.
    let sd = Dims::new(5, 5, 4).unwrap();
    let params = SsimParams::with_window(3);
    let a = uniform(&mut r, &sd.as_vec(), 0.0, 1.0);
    let b = uniform(&mut r, &sd.as_vec(), 0.0, 1.0);
    let go = uniform(&mut r, &sd.as_vec(), -1.0, 1.0);
    let (ga, gb) = ssim_map_backward(&a, &b, &params, &go).unwrap();
    out.push((
        "ssim_map/a",
        fd_rel_error(ga.data(), a.data(), |v| dot(ssim_map(&with_data(&a, v), &b, &params).unwrap().data(), go.data())),
    ));
    out.push((
        "ssim_map/b",
        fd_rel_error(gb.data(), b.data(), |v| dot(ssim_map(&a, &with_data(&b, v), &params).unwrap().data(), go.data())),
    ));

    // Loss terms.
    let f = uniform(&mut r, &sd.as_vec(), 0.0, 1.0);
    let wv = uniform(&mut r, &sd.as_vec(), 0.0, 1.0);
    out.push((
        "photometric",
        fd_rel_error(photometric_grad(&f, &wv).unwrap().data(), wv.data(), |v| {
            photometric_loss(&f, &with_data(&wv, v)).unwrap()
        }),
    ));
    out.push((
        "ssim_loss",
        fd_rel_error(ssim_grad(&f, &wv, &params).unwrap().data(), wv.data(), |v| {
            ssim_loss(&f, &with_data(&wv, v), &params).unwrap()
        }),
    ));
    let od = Dims::new(4, 4, 3).unwrap();
    let phi = off_knot_coords(&mut r, od, od);
    out.push((
        "occupancy",
        fd_rel_error(occupancy_grad(&phi, od).unwrap().data(), phi.data(), |v| {
            occupancy_loss(&with_data(&phi, v), od).unwrap()
        }),
    ));
    out
}

/// Gradient of the total loss with respect to the correspondence field on a
/// 5³ volume, with the image terms flowing through the sampler.
pub fn phi_gradient_check() -> f64 {
    let d = Dims::cube(5).unwrap();
    let mut r = rng(2);
    let fixed = smooth_image(d, 0.0);
    let moving = smooth_image(d, 0.7);
    let phi = off_knot_coords(&mut r, d, d);
    let weights = LossWeights::default();
    let ssim = SsimParams::with_window(3);
    let warped = trilinear_sample(&moving, &phi).unwrap();
    let (_, grads) = total_loss_with_grads(&fixed, &warped, &phi, d, &weights, &ssim).unwrap();
    let mut g = trilinear_sample_backward(&moving, &phi, &grads.warped, false).unwrap().coords;
    g.data_mut().iter_mut().zip(grads.phi.data()).for_each(|(a, &b)| *a += b);
    fd_rel_error(g.data(), phi.data(), |v| {
        let p = with_data(&phi, v);
        let w = trilinear_sample(&moving, &p).unwrap();
        total_loss(&fixed, &w, &p, d, &weights, &ssim).unwrap().total
    })
}

fn e2e_loss(params: &ModelParams<f64>, fixed: &Tensor<f64>, moving: &Tensor<f64>, d: Dims, ssim: &SsimParams) -> f64 {
    let grid = make_grid::<f64>(d);
    let (_, phi) = ncf_forward(params, &grid).unwrap();
    let warped = trilinear_sample(moving, &phi).unwrap();
    total_loss(fixed, &warped, &phi, d, &LossWeights::default(), ssim).unwrap().total
}

/// End-to-end parameter gradient on a 6³ pair with a small network whose
/// final layers are randomized so every path carries signal. Returns the
/// number of parameters checked and the relative error.
pub fn end_to_end_gradient_check() -> (usize, f64) {
    let d = Dims::cube(6).unwrap();
    let cfg = ModelConfig {
        hidden_width: 6,
        sm_channels: 2,
        activation_slope: 0.01,
    };
    let ssim = SsimParams::with_window(5);
    let mut params = init_params::<f64>(&cfg, 7).unwrap();
    let mut r = rng(3);
    for p in params.params_mut() {
        if p.name.starts_with("ccm.4") || p.name.starts_with("sm.conv2") {
            p.value.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.05..0.05));
        }
    }
    let fixed = smooth_image(d, 0.0);
    let moving = smooth_image(d, 0.5);

    let grid = make_grid::<f64>(d);
    let pass = ncf_forward_train(&params, &grid).unwrap();
    let warped = trilinear_sample(&moving, &pass.phi).unwrap();
    let (_, grads) =
        total_loss_with_grads(&fixed, &warped, &pass.phi, d, &LossWeights::default(), &ssim).unwrap();
    let mut g_phi = trilinear_sample_backward(&moving, &pass.phi, &grads.warped, false).unwrap().coords;
    g_phi.data_mut().iter_mut().zip(grads.phi.data()).for_each(|(a, &b)| *a += b);
    params.zero_grad();
    ncf_backward(&mut params, &pass, &g_phi).unwrap();

    let analytic: Vec<f64> = params.params().iter().flat_map(|p| p.grad.clone()).collect();
    let x0: Vec<f64> = params.params().iter().flat_map(|p| p.value.data().to_vec()).collect();
    let mut probe = params.clone();
    let err = fd_rel_error(&analytic, &x0, |v| {
        let mut off = 0;
        for p in probe.params_mut() {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&v[off..off + n]);
            off += n;
        }
        e2e_loss(&probe, &fixed, &moving, d, &ssim)
    });
    (x0.len(), err)
}

/// Ten Adam steps on `f(x) = x²` from `x = 1` with `lr = 0.1`, as produced
/// by an independent reference implementation.
pub const ADAM_REFERENCE: [f64; 10] = [
    0.9000000005,
    0.8004122286917927,
    0.7015862729460302,
    0.6039390605737459,
    0.5079636592643418,
    0.41423645599366177,
    0.3234207049391019,
    0.23626372452104175,
    0.15358456007036347,
    0.07624915560691209,
];

pub fn adam_trace() -> Vec<f64> {
    let mut x = [1.0f64];
    let mut state = AdamState::new(1);
    (0..10)
        .map(|_| {
            let g = [2.0 * x[0]];
            adam_step("x", &mut x, &g, &mut state, 0.1).unwrap();
            x[0]
        })
        .collect()
}

pub fn adam_max_deviation() -> f64 {
    adam_trace()
        .iter()
        .zip(ADAM_REFERENCE)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}
