//! Spectral loss terms on the 2-D DFT of each channel.
//!
//! `fft_loss_terms(pred, gt)` emits a length-2 vector `[amp, phase]`:
//! mean L1 distance between amplitude spectra, and mean L1 distance between
//! phase angles over bins where the reference amplitude is at least `1e-8`
//! (the rest carry no usable phase). The reference is plain data; gradients
//! flow to `pred` only, via the adjoint DFT of the complex-domain gradient.

use crate::tape::{Element, Tx};
use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewD, Ix3};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

const PHASE_AMP_FLOOR: f64 = 1e-8;

fn fft2<E: Element>(x: &ArrayView2<Complex<E>>, planner: &mut FftPlanner<E>, forward: bool) -> Array2<Complex<E>> {
    let (h, w) = x.dim();
    let row_fft = if forward { planner.plan_fft_forward(w) } else { planner.plan_fft_inverse(w) };
    let col_fft = if forward { planner.plan_fft_forward(h) } else { planner.plan_fft_inverse(h) };
    let mut buf = x.to_owned();
    for mut row in buf.rows_mut() {
        let mut tmp: Vec<Complex<E>> = row.iter().copied().collect();
        row_fft.process(&mut tmp);
        for (dst, src) in row.iter_mut().zip(tmp) {
            *dst = src;
        }
    }
    let mut col = vec![Complex::new(E::zero(), E::zero()); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = buf[[i, j]];
        }
        col_fft.process(&mut col);
        for i in 0..h {
            buf[[i, j]] = col[i];
        }
    }
    buf
}

fn to_complex<E: Element>(x: &ArrayView2<E>) -> Array2<Complex<E>> {
    x.mapv(|v| Complex::new(v, E::zero()))
}

fn sign<E: Element>(v: E) -> E {
    if v > E::zero() {
        E::one()
    } else if v < E::zero() {
        -E::one()
    } else {
        E::zero()
    }
}

pub fn fft_loss_terms<'t, E: Element>(pred: Tx<'t, E>, gt: &ArrayViewD<'_, E>) -> Tx<'t, E> {
    let pv = pred.value();
    let pd = pv.view().into_dimensionality::<Ix3>().expect("fft_loss_terms: pred (C,H,W)");
    let gd = gt.view().into_dimensionality::<Ix3>().expect("fft_loss_terms: gt (C,H,W)");
    let (c, h, w) = pd.dim();
    assert_eq!(gd.dim(), (c, h, w), "fft_loss_terms: shape mismatch");

    let mut planner = FftPlanner::<E>::new();
    let floor = E::cast(PHASE_AMP_FLOOR);
    let mut spectra = Vec::with_capacity(c);
    let mut gt_spectra = Vec::with_capacity(c);
    let mut amp_sum = 0.0f64;
    let mut phase_sum = 0.0f64;
    let mut mask_count: usize = 0;
    for ci in 0..c {
        let xs = fft2(&to_complex(&pd.index_axis(ndarray::Axis(0), ci)).view(), &mut planner, true);
        let gs = fft2(&to_complex(&gd.index_axis(ndarray::Axis(0), ci)).view(), &mut planner, true);
        for (xk, gk) in xs.iter().zip(gs.iter()) {
            let (ax, ag) = (xk.norm(), gk.norm());
            amp_sum += (ax - ag).abs().as_f64();
            if ag >= floor {
                phase_sum += (xk.arg() - gk.arg()).abs().as_f64();
                mask_count += 1;
            }
        }
        spectra.push(xs);
        gt_spectra.push(gs);
    }
    let n_total = E::cast((c * h * w) as f64);
    let amp = E::cast(amp_sum / (c * h * w) as f64);
    let phase = if mask_count > 0 { E::cast(phase_sum / mask_count as f64) } else { E::zero() };

    let ip = pred.id;
    pred.tape.push(
        ndarray::arr1(&[amp, phase]).into_dyn(),
        Some(Box::new(move |grad| {
            let (g_amp, g_phase) = (grad[[0]], grad[[1]]);
            let amp_scale = g_amp / n_total;
            let phase_scale = if mask_count > 0 {
                g_phase / E::cast(mask_count as f64)
            } else {
                E::zero()
            };
            let mut dx = ArrayD::<E>::zeros(ndarray::IxDyn(&[c, h, w]));
            let mut planner = FftPlanner::<E>::new();
            for ci in 0..c {
                let xs = &spectra[ci];
                let gs = &gt_spectra[ci];
                let mut gc = Array2::<Complex<E>>::zeros((h, w));
                for ((xk, gk), out) in xs.iter().zip(gs.iter()).zip(gc.iter_mut()) {
                    let (ax, ag) = (xk.norm(), gk.norm());
                    let mut re = E::zero();
                    let mut im = E::zero();
                    if ax > E::zero() {
                        let s = amp_scale * sign(ax - ag);
                        re = re + s * xk.re / ax;
                        im = im + s * xk.im / ax;
                        if ag >= floor {
                            let sp = phase_scale * sign(xk.arg() - gk.arg()) / (ax * ax);
                            re = re - sp * xk.im;
                            im = im + sp * xk.re;
                        }
                    }
                    *out = Complex::new(re, im);
                }
                // chain rule through the DFT: the adjoint of a forward FFT is the
                // unnormalized inverse FFT; the input is real, so keep Re only
                let back = fft2(&gc.view(), &mut planner, false);
                let mut ch = dx.index_axis_mut(ndarray::Axis(0), ci);
                for (dst, src) in ch.iter_mut().zip(back.iter()) {
                    *dst = src.re;
                }
            }
            vec![(ip, dx)]
        })),
    )
}
