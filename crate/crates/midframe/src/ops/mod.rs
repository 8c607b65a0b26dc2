//! Differentiable operations. Every op pushes exactly one tape node.

mod attn;
mod basic;
mod conv;
mod fft;
mod resample;

pub use attn::window_cross_attention;
pub use basic::{
    add, add_scalar, charbonnier_mean, clamp01, concat_ch, crop, layer_norm_ch, leaky_relu, mean,
    mean_abs, mul, replicate_pad, scale, sigmoid, slice_ch, sub,
};
pub use conv::{conv2d, Conv2dCfg, Padding};
pub use fft::fft_loss_terms;
pub use resample::{bilinear_up2, down2, grid_sample, subsample2, zero_stuff2};
