//! Differentiable kernels with hand-written reverse passes, plus the
//! optimizer and learning-rate schedule.
//!
//! Every kernel comes as a forward function and a `*_backward` function that
//! maps an upstream gradient to gradients of the kernel's inputs. The model
//! composes them in a fixed order; there is no tape.

mod activation;
mod adam;
mod conv;
pub(crate) mod linalg;
mod linear;
pub(crate) mod sample;
mod schedule;
mod ssim;
mod tensor;

pub use activation::{leaky_relu, leaky_relu_backward};
pub use adam::{adam_step, AdamState};
pub use conv::{conv3d, conv3d_backward, Conv3dGrads};
pub use linear::{linear, linear_backward, LinearGrads};
pub use sample::{
    trilinear_sample, trilinear_sample_backward, trilinear_splat, trilinear_splat_backward,
    SampleGrads,
};
pub use schedule::cosine_lr;
pub use ssim::{ssim_map, ssim_map_backward, SsimParams};
pub use tensor::Tensor;
