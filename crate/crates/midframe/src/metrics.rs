//! Image quality metrics: PSNR and single-scale SSIM.
//!
//! Both operate on `(C, H, W)` tensors with values in `[0, 1]` and reduce in
//! f64. PSNR is capped at 99 dB so identical inputs report a finite number.

use ndarray::{Array2, ArrayD, ArrayView2};

/// Reported for identical inputs instead of infinity.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("image {h}x{w} smaller than the {win}x{win} SSIM window")]
    TooSmall { h: usize, w: usize, win: usize },
    #[error("expected a (C, H, W) tensor, got shape {0:?}")]
    NotAnImage(Vec<usize>),
}

fn check_same_shape(a: &ArrayD<f32>, b: &ArrayD<f32>) -> Result<(), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch { a: a.shape().to_vec(), b: b.shape().to_vec() });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over a unit dynamic range, capped at
/// [`PSNR_CAP_DB`]. Accepts tensors of any rank as long as the shapes match.
pub fn psnr(a: &ArrayD<f32>, b: &ArrayD<f32>) -> Result<f64, MetricError> {
    check_same_shape(a, b)?;
    let mut sum = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x as f64 - y as f64;
        sum += d * d;
    }
    let mse = sum / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Drops a `margin`-pixel border from the two trailing (spatial) axes.
pub fn crop_margin(x: &ArrayD<f32>, margin: usize) -> ArrayD<f32> {
    let nd = x.ndim();
    assert!(nd >= 2, "need spatial axes to crop");
    let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    assert!(2 * margin < h && 2 * margin < w, "margin {margin} leaves no {h}x{w} interior");
    let mut v = x.view();
    v.slice_axis_inplace(ndarray::Axis(nd - 2), (margin..h - margin).into());
    v.slice_axis_inplace(ndarray::Axis(nd - 1), (margin..w - margin).into());
    v.to_owned()
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, wi) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *wi = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    for wi in &mut w {
        *wi /= s;
    }
    w
}

/// One valid-mode pass of the window along each spatial axis in turn.
fn filter_valid(x: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = x.dim();
    let mut rows = Array2::<f64>::zeros((h, w - SSIM_WINDOW + 1));
    for i in 0..h {
        for j in 0..w - SSIM_WINDOW + 1 {
            let mut acc = 0.0;
            for (t, &kt) in k.iter().enumerate() {
                acc += kt * x[(i, j + t)];
            }
            rows[(i, j)] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1));
    for i in 0..h - SSIM_WINDOW + 1 {
        for j in 0..w - SSIM_WINDOW + 1 {
            let mut acc = 0.0;
            for (t, &kt) in k.iter().enumerate() {
                acc += kt * rows[(i + t, j)];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

fn ssim_channel(x: &ArrayView2<f32>, y: &ArrayView2<f32>, k: &[f64; SSIM_WINDOW]) -> (f64, usize) {
    let xf = x.mapv(|v| v as f64);
    let yf = y.mapv(|v| v as f64);
    let mu_x = filter_valid(&xf, k);
    let mu_y = filter_valid(&yf, k);
    let sxx = filter_valid(&(&xf * &xf), k);
    let syy = filter_valid(&(&yf * &yf), k);
    let sxy = filter_valid(&(&xf * &yf), k);
    let mut sum = 0.0;
    for (((( &mx, &my), &xx), &yy), &xy) in
        mu_x.iter().zip(mu_y.iter()).zip(sxx.iter()).zip(syy.iter()).zip(sxy.iter())
    {
        let vx = xx - mx * mx;
        let vy = yy - my * my;
        let cov = xy - mx * my;
        sum += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    (sum, mu_x.len())
}

/// Mean local SSIM over channels and valid 11x11 windows (Gaussian weights,
/// sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1).
pub fn ssim(a: &ArrayD<f32>, b: &ArrayD<f32>) -> Result<f64, MetricError> {
    check_same_shape(a, b)?;
    if a.ndim() != 3 {
        return Err(MetricError::NotAnImage(a.shape().to_vec()));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::TooSmall { h, w, win: SSIM_WINDOW });
    }
    let a3 = a.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let b3 = b.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let k = gaussian_window();
    let mut sum = 0.0;
    let mut n = 0usize;
    for ch in 0..c {
        let (s, cnt) = ssim_channel(&a3.index_axis(ndarray::Axis(0), ch),
                                    &b3.index_axis(ndarray::Axis(0), ch), &k);
        sum += s;
        n += cnt;
    }
    Ok(sum / n as f64)
}
