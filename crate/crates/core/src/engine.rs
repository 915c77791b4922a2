//! The per-pair optimization loop, image warping and field export.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diff::{cosine_lr, trilinear_sample, trilinear_sample_backward, SsimParams, Tensor};
use crate::diff::sample::PointTaps;
use crate::error::{Error, Result};
use crate::losses::{total_loss_with_grads, LossBreakdown, LossWeights};
use crate::metaimage;
use crate::model::{count_params, init_params, ncf_backward, ncf_forward, ncf_forward_train, ModelConfig};
use crate::real::Real;
use crate::volume::{make_grid, normalize_intensity, FieldUnit, IntensityUnit, VectorField, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub iterations: usize,
    pub lr0: f64,
    pub lr1: f64,
    #[serde(flatten)]
    pub weights: LossWeights,
    pub hidden_width: usize,
    pub sm_channels: usize,
    pub activation_slope: f64,
    pub seed: u64,
    pub hu_window: [f64; 2],
    pub ssim_window: usize,
    /// Run every kernel on a single thread.
    pub deterministic: bool,
    /// Progress is logged every `log_every` steps; 0 disables it.
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        RunConfig {
            iterations: 2000,
            lr0: 1e-3,
            lr1: 1e-6,
            weights: LossWeights::default(),
            hidden_width: m.hidden_width,
            sm_channels: m.sm_channels,
            activation_slope: m.activation_slope,
            seed: 0,
            hu_window: [-1000.0, 1000.0],
            ssim_window: SsimParams::default().window,
            deterministic: false,
            log_every: 100,
        }
    }
}

/// Every key a JSON run configuration may contain.
pub const CONFIG_KEYS: &[&str] = &[
    "iterations",
    "lr0",
    "lr1",
    "alpha",
    "beta",
    "gamma",
    "hidden_width",
    "sm_channels",
    "activation_slope",
    "seed",
    "hu_window",
    "ssim_window",
    "deterministic",
    "log_every",
];

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden_width: self.hidden_width,
            sm_channels: self.sm_channels,
            activation_slope: self.activation_slope,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.lr1 > 0.0 && self.lr0 >= self.lr1 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates need lr0 >= lr1 > 0, got lr0={} lr1={}",
                self.lr0, self.lr1
            )));
        }
        if !(self.hu_window[0] < self.hu_window[1]) {
            return Err(Error::Config(format!("degenerate hu_window {:?}", self.hu_window)));
        }
        if self.ssim_window % 2 == 0 {
            return Err(Error::Config(format!(
                "ssim_window must be odd, got {}",
                self.ssim_window
            )));
        }
        self.weights.validate()?;
        self.model_config().validate()
    }

    /// Parses a JSON object. Unknown keys are dropped, logged as a warning
    /// and returned so callers can surface them; known keys missing from the
    /// object keep their defaults.
    pub fn from_json_str(s: &str) -> Result<(RunConfig, Vec<String>)> {
        let value: serde_json::Value =
            serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        let serde_json::Value::Object(mut map) = value else {
            return Err(Error::Config("configuration must be a JSON object".into()));
        };
        let known: BTreeSet<&str> = CONFIG_KEYS.iter().copied().collect();
        let unknown: Vec<String> = map
            .keys()
            .filter(|k| !known.contains(k.as_str()))
            .cloned()
            .collect();
        for k in &unknown {
            map.remove(k);
        }
        if !unknown.is_empty() {
            log::warn!("ignoring unknown config keys: {}", unknown.join(", "));
        }
        let cfg: RunConfig = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok((cfg, unknown))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(RunConfig, Vec<String>)> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s)
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub photometric: f64,
    pub ssim: f64,
    pub occupancy: f64,
}

impl LossRecord {
    fn new(step: usize, lr: f64, b: &LossBreakdown) -> Self {
        LossRecord {
            step,
            lr,
            total: b.total,
            photometric: b.photometric,
            ssim: b.ssim,
            occupancy: b.occupancy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Displacement in voxel units, on the fixed image grid.
    pub offset: VectorField,
    /// Moving image (original intensities) resampled through the field.
    pub warped: Volume,
    pub loss_history: Vec<LossRecord>,
    pub final_lr: f64,
    pub wall_time: f64,
    pub param_count: usize,
}

impl RegistrationResult {
    pub fn initial_loss(&self) -> f64 {
        self.loss_history.first().map_or(f64::NAN, |r| r.total)
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_history.last().map_or(f64::NAN, |r| r.total)
    }
}

/// Mean Euclidean length of the field vectors.
pub fn mean_magnitude(field: &VectorField) -> f64 {
    let n = field.dims().len();
    (0..n)
        .map(|p| {
            let v = field.vector(p);
            (v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>()).sqrt()
        })
        .sum::<f64>()
        / n as f64
}

/// Brings both images to `[0, 1]` with the same mapping.
///
/// HU pairs use `hu_window`; already-normalized pairs pass through; anything
/// else uses the fixed image's min-max range for both.
pub fn preprocess_pair(fixed: &Volume, moving: &Volume, hu_window: [f64; 2]) -> Result<(Volume, Volume)> {
    use IntensityUnit::*;
    match (fixed.unit(), moving.unit()) {
        (Normalized, Normalized) => Ok((fixed.clone(), moving.clone())),
        (Hu, Hu) => {
            let w = (hu_window[0], hu_window[1]);
            Ok((normalize_intensity(fixed, w)?, normalize_intensity(moving, w)?))
        }
        _ => {
            let (lo, hi) = fixed.min_max();
            let (lo, hi) = (lo as f64, hi as f64);
            let w = if hi > lo { (lo, hi) } else { (lo, lo + 1.0) };
            Ok((normalize_intensity(fixed, w)?, normalize_intensity(moving, w)?))
        }
    }
}

fn to_tensor<T: Real>(v: &Volume) -> Tensor<T> {
    Tensor::new(
        &v.dims().as_vec(),
        v.data().iter().map(|&x| T::lit(x as f64)).collect(),
    )
    .expect("volume shape")
}

/// Registers `moving` onto `fixed` in single precision.
pub fn register_pair(fixed: &Volume, moving: &Volume, config: &RunConfig) -> Result<RegistrationResult> {
    register_pair_in::<f32>(fixed, moving, config)
}

/// Registers `moving` onto `fixed`, running every kernel in `T`.
pub fn register_pair_in<T: Real>(
    fixed: &Volume,
    moving: &Volume,
    config: &RunConfig,
) -> Result<RegistrationResult> {
    config.validate()?;
    if fixed.dims() != moving.dims() {
        return Err(Error::shape(
            "register_pair",
            &fixed.dims().as_vec(),
            &moving.dims().as_vec(),
        ));
    }
    if config.deterministic {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| run::<T>(fixed, moving, config))
    } else {
        run::<T>(fixed, moving, config)
    }
}

fn run<T: Real>(fixed: &Volume, moving: &Volume, config: &RunConfig) -> Result<RegistrationResult> {
    let start = Instant::now();
    let dims = fixed.dims();
    let ssim = SsimParams::with_window(config.ssim_window);
    if ssim.window > dims.0.iter().copied().min().unwrap_or(0) {
        return Err(Error::Config(format!(
            "ssim_window {} exceeds the smallest image axis of {:?}",
            ssim.window, dims.0
        )));
    }
    let (f_norm, m_norm) = preprocess_pair(fixed, moving, config.hu_window)?;
    let fixed_t = to_tensor::<T>(&f_norm);
    let moving_t = to_tensor::<T>(&m_norm);
    let grid = make_grid::<T>(dims);
    let mut params = init_params::<T>(&config.model_config(), config.seed)?;

    let iters = config.iterations;
    let mut history = Vec::with_capacity(iters);
    let mut lr = config.lr0;
    for step in 0..iters {
        lr = cosine_lr(step, iters, config.lr0, config.lr1);
        let pass = ncf_forward_train(&params, &grid)?;
        let warped = trilinear_sample(&moving_t, &pass.phi)?;
        let (loss, grads) =
            total_loss_with_grads(&fixed_t, &warped, &pass.phi, dims, &config.weights, &ssim)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                total: loss.total,
                photometric: loss.photometric,
                ssim: loss.ssim,
                occupancy: loss.occupancy,
            });
        }
        history.push(LossRecord::new(step, lr, &loss));
        if config.log_every > 0 && (step % config.log_every == 0 || step + 1 == iters) {
            log::info!(
                "step {step:>5} lr {lr:.3e} total {:.6} photometric {:.6} ssim {:.6} occupancy {:.6}",
                loss.total,
                loss.photometric,
                loss.ssim,
                loss.occupancy
            );
        }

        let mut g_phi = trilinear_sample_backward(&moving_t, &pass.phi, &grads.warped, false)?.coords;
        g_phi
            .data_mut()
            .iter_mut()
            .zip(grads.phi.data())
            .for_each(|(a, &b)| *a += b);
        params.zero_grad();
        ncf_backward(&mut params, &pass, &g_phi)?;
        params.adam_update(lr)?;
    }

    let (offset, _) = ncf_forward(&params, &grid)?;
    let offset = VectorField::new(
        dims,
        FieldUnit::NormalizedOffset,
        offset.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
    )?
    .to_unit(FieldUnit::VoxelDisplacement);
    let warped = warp_image(moving, &offset, Interp::Linear)?;

    Ok(RegistrationResult {
        offset,
        warped,
        loss_history: history,
        final_lr: lr,
        wall_time: start.elapsed().as_secs_f64(),
        param_count: count_params(&config.model_config()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Linear,
    /// Closest voxel, ties toward the lower index. Use for label masks.
    Nearest,
}

impl FromStr for Interp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Interp::Linear),
            "nearest" => Ok(Interp::Nearest),
            _ => Err(Error::InvalidArgument(format!(
                "interpolation must be `linear` or `nearest`, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for Interp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Interp::Linear => "linear",
            Interp::Nearest => "nearest",
        })
    }
}

/// Resamples `moving` at `index + offset` for every voxel index.
pub fn warp_image(moving: &Volume, offset: &VectorField, interp: Interp) -> Result<Volume> {
    let dims = moving.dims();
    if offset.dims() != dims {
        return Err(Error::shape("warp_image", &dims.as_vec(), &offset.dims().as_vec()));
    }
    let offset = offset.to_unit(FieldUnit::VoxelDisplacement);
    let vol: Vec<f64> = moving.data().iter().map(|&v| v as f64).collect();
    let data = (0..dims.len())
        .map(|p| {
            let idx = dims.coords(p);
            let d = offset.vector(p);
            let u: [f64; 3] = std::array::from_fn(|a| idx[a] as f64 + d[a] as f64);
            match interp {
                Interp::Linear => PointTaps::from_index(u, dims).value(&vol, dims) as f32,
                Interp::Nearest => {
                    let [x, y, z] = std::array::from_fn(|a| nearest_index(u[a], dims.0[a]));
                    moving.at(x, y, z)
                }
            }
        })
        .collect();
    Volume::new(dims, moving.spacing(), moving.unit(), data)
}

#[inline]
fn nearest_index(u: f64, size: usize) -> usize {
    (u - 0.5).ceil().clamp(0.0, (size - 1) as f64) as usize
}

pub fn export_field(offset: &VectorField, path: impl AsRef<Path>) -> Result<()> {
    metaimage::save_field(offset, path)
}

pub fn import_field(path: impl AsRef<Path>) -> Result<VectorField> {
    metaimage::load_field(path)
}

pub const CSV_HEADER: &str = "step,lr,total,photometric,ssim,occupancy";

pub fn write_loss_csv(history: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(64 * (history.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.lr, r.total, r.photometric, r.ssim, r.occupancy
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
