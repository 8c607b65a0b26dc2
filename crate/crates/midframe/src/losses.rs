//! Training losses: Charbonnier, Laplacian-pyramid, and frequency terms.
//!
//! All reductions are means so the weights stay comparable across terms.
//! The phase half of the frequency loss uses raw angle differences (no wrap
//! correction) and skips bins whose ground-truth amplitude is below 1e-8;
//! the wrap discontinuity is a documented property of the literal form.

use ndarray::{ArrayD, IxDyn};

use crate::config::LossWeights;
use crate::ops::{
    add, charbonnier_mean, conv2d, fft_loss_terms, mean_abs, replicate_pad, scale, slice_ch, sub,
    subsample2, zero_stuff2, Conv2dCfg, Padding,
};
use crate::tape::{Element, Tape, Tx};

pub const CHARBONNIER_EPS: f64 = 1e-6;
const PYRAMID_LEVELS: usize = 5;

/// Scalar loss handles still attached to the tape.
pub struct LossTerms<'t, E: Element> {
    pub charbonnier: Tx<'t, E>,
    pub laplacian: Tx<'t, E>,
    pub frequency: Tx<'t, E>,
    pub total: Tx<'t, E>,
}

/// Detached per-batch loss values.
#[derive(Clone, Copy, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub charbonnier: f64,
    pub laplacian: f64,
    pub frequency: f64,
    pub total: f64,
}

impl<'t, E: Element> LossTerms<'t, E> {
    pub fn report(&self) -> LossReport {
        let v = |t: Tx<'t, E>| t.value()[[0]].as_f64();
        LossReport {
            charbonnier: v(self.charbonnier),
            laplacian: v(self.laplacian),
            frequency: v(self.frequency),
            total: v(self.total),
        }
    }
}

/// Depth-wise 5×5 binomial kernel ([1,4,6,4,1] outer product), scaled.
fn binomial_kernel<'t, E: Element>(
    tape: &'t Tape<E>,
    channels: usize,
    scale: f64,
) -> Tx<'t, E> {
    const T: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];
    let mut k = ArrayD::zeros(IxDyn(&[channels, 1, 5, 5]));
    for c in 0..channels {
        for i in 0..5 {
            for j in 0..5 {
                k[[c, 0, i, j]] = E::cast(T[i] * T[j] * scale);
            }
        }
    }
    tape.leaf(k)
}

fn blur<'t, E: Element>(x: Tx<'t, E>) -> Tx<'t, E> {
    let ch = x.shape()[0];
    let k = binomial_kernel(x.tape(), ch, 1.0 / 256.0);
    let padded = replicate_pad(x, (2, 2, 2, 2));
    conv2d(padded, k, None, Conv2dCfg { padding: Padding::Valid, groups: ch, ..Default::default() })
}

fn down<'t, E: Element>(x: Tx<'t, E>) -> Tx<'t, E> {
    subsample2(blur(x))
}

fn up<'t, E: Element>(x: Tx<'t, E>) -> Tx<'t, E> {
    let ch = x.shape()[0];
    let k = binomial_kernel(x.tape(), ch, 1.0 / 64.0);
    conv2d(zero_stuff2(x), k, None, Conv2dCfg { groups: ch, ..Default::default() })
}

/// The five band maps L^1..L^5 (finest first, L^5 is the coarsest Gaussian).
fn laplacian_bands<'t, E: Element>(x: Tx<'t, E>) -> Vec<Tx<'t, E>> {
    let mut gauss = vec![x];
    for _ in 0..PYRAMID_LEVELS - 1 {
        let prev = *gauss.last().unwrap();
        gauss.push(down(prev));
    }
    let mut bands = Vec::with_capacity(PYRAMID_LEVELS);
    for i in 1..PYRAMID_LEVELS {
        bands.push(sub(gauss[i - 1], up(gauss[i])));
    }
    bands.push(gauss[PYRAMID_LEVELS - 1]);
    bands
}

/// Unweighted per-band L1 means between the two images' pyramids.
pub fn laplacian_band_terms<'t, E: Element>(
    pred: Tx<'t, E>,
    gt: Tx<'t, E>,
) -> Vec<Tx<'t, E>> {
    let sh = pred.shape();
    assert_eq!(sh, gt.shape(), "laplacian_loss: shape mismatch");
    let min_dim = sh[1].min(sh[2]);
    assert!(
        min_dim >= 1 << PYRAMID_LEVELS,
        "laplacian_loss needs dims >= 32 for 5 levels, got {}x{}",
        sh[1],
        sh[2]
    );
    let bp = laplacian_bands(pred);
    let bg = laplacian_bands(gt);
    bp.into_iter().zip(bg).map(|(a, b)| mean_abs(sub(a, b))).collect()
}

/// Charbonnier penalty mean, ε = 1e-6.
pub fn charbonnier_loss<'t, E: Element>(pred: Tx<'t, E>, gt: Tx<'t, E>) -> Tx<'t, E> {
    charbonnier_mean(pred, gt, CHARBONNIER_EPS)
}

/// Σ_{i=1..5} 2^{i−1} · L1(L^i(pred) − L^i(gt)).
pub fn laplacian_loss<'t, E: Element>(pred: Tx<'t, E>, gt: Tx<'t, E>) -> Tx<'t, E> {
    let terms = laplacian_band_terms(pred, gt);
    let mut total = None;
    for (i, t) in terms.into_iter().enumerate() {
        let weighted = scale(t, (1u64 << i) as f64);
        total = Some(match total {
            None => weighted,
            Some(acc) => add(acc, weighted),
        });
    }
    total.unwrap()
}

/// ½·L1 of amplitude spectra difference + ½·L1 of raw phase difference
/// (masked where the ground-truth amplitude vanishes).
pub fn frequency_loss<'t, E: Element>(pred: Tx<'t, E>, gt: Tx<'t, E>) -> Tx<'t, E> {
    let gv = gt.value();
    let terms = fft_loss_terms(pred, &gv.view());
    let amp = slice_ch_scalar(terms, 0);
    let phase = slice_ch_scalar(terms, 1);
    add(scale(amp, 0.5), scale(phase, 0.5))
}

fn slice_ch_scalar<'t, E: Element>(t: Tx<'t, E>, i: usize) -> Tx<'t, E> {
    slice_ch(t, i, i + 1)
}

/// All three losses plus their weighted sum.
pub fn total_loss<'t, E: Element>(
    pred: Tx<'t, E>,
    gt: Tx<'t, E>,
    w: &LossWeights,
) -> LossTerms<'t, E> {
    let charbonnier = charbonnier_loss(pred, gt);
    let laplacian = laplacian_loss(pred, gt);
    let frequency = frequency_loss(pred, gt);
    let total = add(
        add(scale(charbonnier, w.lambda_ch), scale(laplacian, w.lambda_lap)),
        scale(frequency, w.lambda_f),
    );
    LossTerms { charbonnier, laplacian, frequency, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_assert, test_array};
    use ndarray::{ArrayD, IxDyn};

    // plain-loop pyramid oracle: direct 2D convolutions, no tape machinery
    mod oracle {
        pub fn blur(x: &[Vec<f64>], scale: f64) -> Vec<Vec<f64>> {
            let t = [1.0, 4.0, 6.0, 4.0, 1.0];
            let (h, w) = (x.len(), x[0].len());
            let mut out = vec![vec![0.0; w]; h];
            for r in 0..h {
                for c in 0..w {
                    let mut s = 0.0;
                    for (di, ti) in t.iter().enumerate() {
                        for (dj, tj) in t.iter().enumerate() {
                            let rr = (r + di).saturating_sub(2).min(h - 1);
                            let cc = (c + dj).saturating_sub(2).min(w - 1);
                            s += ti * tj * x[rr][cc];
                        }
                    }
                    out[r][c] = s * scale;
                }
            }
            out
        }

        pub fn down(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
            let b = blur(x, 1.0 / 256.0);
            b.iter().step_by(2).map(|row| row.iter().step_by(2).copied().collect()).collect()
        }

        pub fn up(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
            let (h, w) = (x.len(), x[0].len());
            let mut stuffed = vec![vec![0.0; 2 * w]; 2 * h];
            for r in 0..h {
                for c in 0..w {
                    stuffed[2 * r][2 * c] = x[r][c];
                }
            }
            let t = [1.0, 4.0, 6.0, 4.0, 1.0];
            let (h2, w2) = (2 * h, 2 * w);
            let mut out = vec![vec![0.0; w2]; h2];
            for r in 0..h2 {
                for c in 0..w2 {
                    let mut s = 0.0;
                    for (di, ti) in t.iter().enumerate() {
                        for (dj, tj) in t.iter().enumerate() {
                            let rr = r as isize + di as isize - 2;
                            let cc = c as isize + dj as isize - 2;
                            if rr >= 0 && rr < h2 as isize && cc >= 0 && cc < w2 as isize {
                                s += ti * tj * stuffed[rr as usize][cc as usize];
                            }
                        }
                    }
                    out[r][c] = s / 64.0;
                }
            }
            out
        }

        pub fn weighted_l1(a: &ndarray::ArrayD<f64>, b: &ndarray::ArrayD<f64>) -> f64 {
            let to_rows = |x: &ndarray::ArrayD<f64>, ch: usize| -> Vec<Vec<f64>> {
                let (h, w) = (x.shape()[1], x.shape()[2]);
                (0..h).map(|r| (0..w).map(|c| x[[ch, r, c]]).collect()).collect()
            };
            let channels = a.shape()[0];
            let mut per_band = vec![(0.0, 0usize); 5];
            for ch in 0..channels {
                let mut ga = vec![to_rows(a, ch)];
                let mut gb = vec![to_rows(b, ch)];
                for _ in 0..4 {
                    ga.push(down(ga.last().unwrap()));
                    gb.push(down(gb.last().unwrap()));
                }
                for i in 0..5 {
                    let (la, lb) = if i < 4 {
                        let ua = up(&ga[i + 1]);
                        let ub = up(&gb[i + 1]);
                        let sub2 = |g: &[Vec<f64>], u: &[Vec<f64>]| -> Vec<Vec<f64>> {
                            g.iter()
                                .zip(u)
                                .map(|(gr, ur)| gr.iter().zip(ur).map(|(x, y)| x - y).collect())
                                .collect()
                        };
                        (sub2(&ga[i], &ua), sub2(&gb[i], &ub))
                    } else {
                        (ga[4].clone(), gb[4].clone())
                    };
                    for (ra, rb) in la.iter().zip(&lb) {
                        for (x, y) in ra.iter().zip(rb) {
                            per_band[i].0 += (x - y).abs();
                            per_band[i].1 += 1;
                        }
                    }
                }
            }
            per_band
                .iter()
                .enumerate()
                .map(|(i, (s, n))| (1u64 << i) as f64 * s / *n as f64)
                .sum()
        }
    }

    fn pair(seed: u64, h: usize, w: usize) -> (ArrayD<f64>, ArrayD<f64>) {
        (test_array(&[3, h, w], seed, 0.0, 1.0), test_array(&[3, h, w], seed + 50, 0.0, 1.0))
    }

    #[test]
    fn identical_inputs_hit_identity_values() {
        let tape: Tape<f64> = Tape::new();
        let v = test_array::<f64>(&[3, 32, 32], 1, 0.0, 1.0);
        let a = tape.leaf(v.clone());
        let b = tape.leaf(v);
        let t = total_loss(a, b, &LossWeights::default());
        let r = t.report();
        assert!((r.charbonnier - 1e-6).abs() < 1e-15);
        assert_eq!(r.laplacian, 0.0);
        assert_eq!(r.frequency, 0.0);
        assert!((r.total - 1e-6).abs() < 1e-15);
    }

    #[test]
    fn laplacian_matches_independent_oracle() {
        let (av, bv) = pair(3, 32, 48);
        let tape: Tape<f64> = Tape::new();
        let l = laplacian_loss(tape.leaf(av.clone()), tape.leaf(bv.clone()));
        let expect = oracle::weighted_l1(&av, &bv);
        assert!(
            (l.value()[[0]] - expect).abs() < 1e-9,
            "tape {} vs oracle {}",
            l.value()[[0]],
            expect
        );
    }

    #[test]
    fn constant_offset_lands_in_the_coarse_bands() {
        let base = test_array::<f64>(&[1, 32, 32], 9, 0.2, 0.8);
        let shifted = base.mapv(|v| v + 0.1);
        let tape: Tape<f64> = Tape::new();
        let terms = laplacian_band_terms(tape.leaf(shifted), tape.leaf(base));
        let vals: Vec<f64> = terms.iter().map(|t| t.value()[[0]]).collect();
        // a DC offset passes through every low-pass into the Gaussian tail
        // band; border effects leak a little into the difference bands
        assert!((vals[4] - 0.1).abs() < 1e-9, "coarse band {vals:?}");
        let weighted: Vec<f64> =
            vals.iter().enumerate().map(|(i, v)| (1u64 << i) as f64 * v).collect();
        let total: f64 = weighted.iter().sum();
        assert!(weighted[4] > 0.5 * total, "coarsest band must dominate: {weighted:?}");
    }

    #[test]
    fn checkerboard_noise_is_a_fine_band_phenomenon() {
        let base = test_array::<f64>(&[1, 32, 32], 11, 0.3, 0.7);
        let mut noisy = base.clone();
        for r in 0..32 {
            for c in 0..32 {
                let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
                noisy[[0, r, c]] += 0.05 * sign;
            }
        }
        let tape: Tape<f64> = Tape::new();
        let terms = laplacian_band_terms(tape.leaf(noisy), tape.leaf(base));
        let vals: Vec<f64> = terms.iter().map(|t| t.value()[[0]]).collect();
        assert!(vals[0] > 10.0 * vals[4], "fine {} vs coarse {}", vals[0], vals[4]);
    }

    #[test]
    fn uniform_difference_matches_closed_form() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(ArrayD::from_elem(IxDyn(&[3, 16, 16]), 0.5));
        let b = tape.leaf(ArrayD::from_elem(IxDyn(&[3, 16, 16]), 0.4));
        let l = charbonnier_loss(a, b);
        let expect = (0.01f64 + 1e-12).sqrt();
        assert!((l.value()[[0]] - expect).abs() < 1e-9);
    }

    #[test]
    fn circular_shift_preserves_amplitude_only() {
        let gv = test_array::<f64>(&[1, 16, 16], 21, 0.0, 1.0);
        let mut shifted = gv.clone();
        for r in 0..16 {
            for c in 0..16 {
                shifted[[0, r, c]] = gv[[0, (r + 3) % 16, (c + 5) % 16]];
            }
        }
        let tape: Tape<f64> = Tape::new();
        let pred = tape.leaf(shifted);
        let gt = tape.leaf(gv);
        let terms = fft_loss_terms(pred, &gt.value().view());
        let amp = terms.value()[[0]];
        let phase = terms.value()[[1]];
        assert!(amp.abs() < 1e-7, "amplitude term should be shift-invariant: {amp}");
        assert!(phase > 1e-3, "phase term should see the shift: {phase}");
    }

    #[test]
    fn doubling_scales_the_amplitude_term_linearly() {
        let gv = test_array::<f64>(&[1, 8, 8], 23, 0.1, 1.0);
        let tape: Tape<f64> = Tape::new();
        let pred = tape.leaf(gv.mapv(|v| 2.0 * v));
        let gt = tape.leaf(gv.clone());
        let terms = fft_loss_terms(pred, &gt.value().view());
        // |F(2g)| - |F(g)| = |F(g)|, and the phase term vanishes
        let mut expect = 0.0;
        let gtt = tape.leaf(ArrayD::zeros(IxDyn(&[1, 8, 8])));
        let base = fft_loss_terms(gt, &gtt.value().view());
        expect += base.value()[[0]];
        assert!((terms.value()[[0]] - expect).abs() < 1e-9);
        assert!(terms.value()[[1]].abs() < 1e-12);
    }

    #[test]
    fn report_total_obeys_the_weighted_sum() {
        let (av, bv) = pair(31, 32, 32);
        let tape: Tape<f64> = Tape::new();
        let w = LossWeights { lambda_ch: 0.7, lambda_lap: 1.3, lambda_f: 0.05 };
        let t = total_loss(tape.leaf(av), tape.leaf(bv), &w);
        let r = t.report();
        let manual = 0.7 * r.charbonnier + 1.3 * r.laplacian + 0.05 * r.frequency;
        assert!((r.total - manual).abs() <= 1e-12 * manual.abs());
        let only_ch = LossWeights { lambda_ch: 1.0, lambda_lap: 0.0, lambda_f: 0.0 };
        let t2 = total_loss(
            tape.leaf(test_array(&[3, 32, 32], 33, 0.0, 1.0)),
            tape.leaf(test_array(&[3, 32, 32], 34, 0.0, 1.0)),
            &only_ch,
        );
        let r2 = t2.report();
        assert_eq!(r2.total, r2.charbonnier);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (av, bv) = pair(41, 16, 16);
        fd_assert(
            |tape, xs| charbonnier_loss(xs[0], tape.leaf(bv.clone())),
            &[av.clone()],
            6,
            1e-3,
        );
        fd_assert(
            |tape, xs| frequency_loss(xs[0], tape.leaf(bv.clone())),
            &[av],
            6,
            1e-3,
        );
        let (a32, b32) = pair(47, 32, 32);
        fd_assert(
            |tape, xs| laplacian_loss(xs[0], tape.leaf(b32.clone())),
            &[a32],
            6,
            1e-3,
        );
    }
}
