//! Windowed cross-frame attention core.
//!
//! Inputs are already-projected maps, each `(d, H, W)` with `H`, `W` divisible
//! by `win`. Queries come from one frame; keys/values are the concatenation of
//! the same window from both frames, so each query attends over `2·win²`
//! tokens. Softmax is per window and per head; the backward pass recomputes
//! attention weights rather than storing them.

use crate::tape::{Element, Tx};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView3, Ix3};

fn gather<E: Element>(m: &ArrayView3<E>, wy: usize, wx: usize, win: usize) -> Array2<E> {
    let d = m.dim().0;
    let mut out = Array2::<E>::zeros((win * win, d));
    for iy in 0..win {
        for ix in 0..win {
            let t = iy * win + ix;
            for c in 0..d {
                out[[t, c]] = m[[c, wy * win + iy, wx * win + ix]];
            }
        }
    }
    out
}

fn scatter_add<E: Element>(dst: &mut Array3<E>, src: &Array2<E>, wy: usize, wx: usize, win: usize) {
    let d = dst.dim().0;
    for iy in 0..win {
        for ix in 0..win {
            let t = iy * win + ix;
            for c in 0..d {
                let p = &mut dst[[c, wy * win + iy, wx * win + ix]];
                *p = *p + src[[t, c]];
            }
        }
    }
}

fn softmax_rows<E: Element>(s: &mut Array2<E>) {
    for mut row in s.rows_mut() {
        let mx = row.iter().fold(E::neg_infinity(), |a, &v| if v > a { v } else { a });
        let mut sum = E::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        let inv = E::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn window_pass<E: Element>(
    q: &ArrayView3<E>,
    ks: &ArrayView3<E>,
    vs: &ArrayView3<E>,
    ko: &ArrayView3<E>,
    vo: &ArrayView3<E>,
    heads: usize,
    win: usize,
    mut grad: Option<(&ArrayView3<E>, &mut [Array3<E>; 5])>,
) -> Array3<E> {
    let (d, h, w) = q.dim();
    let n = win * win;
    let dh = d / heads;
    let scale = E::one() / E::cast((dh as f64).sqrt());
    let mut out = Array3::<E>::zeros((d, h, w));
    for wy in 0..h / win {
        for wx in 0..w / win {
            let qw = gather(q, wy, wx, win);
            let mut kw = Array2::<E>::zeros((2 * n, d));
            let mut vw = Array2::<E>::zeros((2 * n, d));
            kw.slice_mut(ndarray::s![..n, ..]).assign(&gather(ks, wy, wx, win));
            kw.slice_mut(ndarray::s![n.., ..]).assign(&gather(ko, wy, wx, win));
            vw.slice_mut(ndarray::s![..n, ..]).assign(&gather(vs, wy, wx, win));
            vw.slice_mut(ndarray::s![n.., ..]).assign(&gather(vo, wy, wx, win));
            let gw = grad.as_ref().map(|(g, _)| gather(g, wy, wx, win));
            let mut ow = Array2::<E>::zeros((n, d));
            let mut dqw = Array2::<E>::zeros((n, d));
            let mut dkw = Array2::<E>::zeros((2 * n, d));
            let mut dvw = Array2::<E>::zeros((2 * n, d));
            for hd in 0..heads {
                let cs = hd * dh..(hd + 1) * dh;
                let qh = qw.slice(ndarray::s![.., cs.clone()]).to_owned();
                let kh = kw.slice(ndarray::s![.., cs.clone()]).to_owned();
                let vh = vw.slice(ndarray::s![.., cs.clone()]).to_owned();
                let mut a = Array2::<E>::zeros((n, 2 * n));
                general_mat_mul(scale, &qh, &kh.t().to_owned(), E::zero(), &mut a);
                softmax_rows(&mut a);
                if let Some(gw) = &gw {
                    let goh = gw.slice(ndarray::s![.., cs.clone()]).to_owned();
                    let mut da = Array2::<E>::zeros((n, 2 * n));
                    general_mat_mul(E::one(), &goh, &vh.t().to_owned(), E::zero(), &mut da);
                    let mut dvh = Array2::<E>::zeros((2 * n, dh));
                    general_mat_mul(E::one(), &a.t().to_owned(), &goh, E::zero(), &mut dvh);
                    // softmax backward: ds = a ⊙ (da − rowsum(da ⊙ a))
                    let mut ds = da;
                    for (mut dr, ar) in ds.rows_mut().into_iter().zip(a.rows()) {
                        let dot = dr.iter().zip(ar.iter()).fold(E::zero(), |s, (&x, &y)| s + x * y);
                        for (dv, &av) in dr.iter_mut().zip(ar.iter()) {
                            *dv = av * (*dv - dot);
                        }
                    }
                    let mut dqh = Array2::<E>::zeros((n, dh));
                    general_mat_mul(scale, &ds, &kh, E::zero(), &mut dqh);
                    let mut dkh = Array2::<E>::zeros((2 * n, dh));
                    general_mat_mul(scale, &ds.t().to_owned(), &qh, E::zero(), &mut dkh);
                    dqw.slice_mut(ndarray::s![.., cs.clone()]).assign(&dqh);
                    dkw.slice_mut(ndarray::s![.., cs.clone()]).assign(&dkh);
                    dvw.slice_mut(ndarray::s![.., cs.clone()]).assign(&dvh);
                } else {
                    let mut oh = Array2::<E>::zeros((n, dh));
                    general_mat_mul(E::one(), &a, &vh, E::zero(), &mut oh);
                    ow.slice_mut(ndarray::s![.., cs.clone()]).assign(&oh);
                }
            }
            if let Some((_, sinks)) = grad.as_mut() {
                let (dq, rest) = sinks.split_at_mut(1);
                let (dks_dvs, dko_dvo) = rest.split_at_mut(2);
                scatter_add(&mut dq[0], &dqw, wy, wx, win);
                scatter_add(&mut dks_dvs[0], &dkw.slice(ndarray::s![..n, ..]).to_owned(), wy, wx, win);
                scatter_add(&mut dks_dvs[1], &dvw.slice(ndarray::s![..n, ..]).to_owned(), wy, wx, win);
                scatter_add(&mut dko_dvo[0], &dkw.slice(ndarray::s![n.., ..]).to_owned(), wy, wx, win);
                scatter_add(&mut dko_dvo[1], &dvw.slice(ndarray::s![n.., ..]).to_owned(), wy, wx, win);
            } else {
                scatter_add(&mut out, &ow, wy, wx, win);
            }
        }
    }
    out
}

pub fn window_cross_attention<'t, E: Element>(
    q: Tx<'t, E>,
    k_self: Tx<'t, E>,
    v_self: Tx<'t, E>,
    k_other: Tx<'t, E>,
    v_other: Tx<'t, E>,
    heads: usize,
    win: usize,
) -> Tx<'t, E> {
    let (qv, ksv, vsv) = (q.value(), k_self.value(), v_self.value());
    let (kov, vov) = (k_other.value(), v_other.value());
    let qd = qv.view().into_dimensionality::<Ix3>().expect("attention: q (d,H,W)");
    let (d, h, w) = qd.dim();
    for m in [&ksv, &vsv, &kov, &vov] {
        assert_eq!(m.shape(), &[d, h, w], "attention: map shape mismatch");
    }
    assert!(h % win == 0 && w % win == 0, "attention: H,W must be multiples of {win}");
    assert!(d % heads == 0, "attention: heads must divide channels");

    let out = window_pass(
        &qd,
        &ksv.view().into_dimensionality::<Ix3>().unwrap(),
        &vsv.view().into_dimensionality::<Ix3>().unwrap(),
        &kov.view().into_dimensionality::<Ix3>().unwrap(),
        &vov.view().into_dimensionality::<Ix3>().unwrap(),
        heads,
        win,
        None,
    );

    let ids = [q.id, k_self.id, v_self.id, k_other.id, v_other.id];
    q.tape.push(
        out.into_dyn(),
        Some(Box::new(move |grad| {
            let gd = grad.view().into_dimensionality::<Ix3>().unwrap();
            let mut sinks: [Array3<E>; 5] = std::array::from_fn(|_| Array3::zeros((d, h, w)));
            window_pass(
                &qv.view().into_dimensionality::<Ix3>().unwrap(),
                &ksv.view().into_dimensionality::<Ix3>().unwrap(),
                &vsv.view().into_dimensionality::<Ix3>().unwrap(),
                &kov.view().into_dimensionality::<Ix3>().unwrap(),
                &vov.view().into_dimensionality::<Ix3>().unwrap(),
                heads,
                win,
                Some((&gd, &mut sinks)),
            );
            ids.iter().copied().zip(sinks.into_iter().map(|a| a.into_dyn())).collect()
        })),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_assert, test_array};
    use crate::ops::{mean, mul};
    use crate::tape::Tape;
    use ndarray::IxDyn;

    #[test]
    fn single_token_window_matches_hand_computation() {
        // win=1, 1x1 map: each query attends over exactly [self, other]
        let t: Tape<f64> = Tape::new();
        let mk = |vals: [f64; 2]| {
            t.leaf(ndarray::Array3::from_shape_vec((2, 1, 1), vals.to_vec()).unwrap().into_dyn())
        };
        let q = mk([1.0, -0.5]);
        let ks = mk([0.3, 0.8]);
        let vs = mk([2.0, -1.0]);
        let ko = mk([-0.2, 0.4]);
        let vo = mk([0.5, 3.0]);
        let out = window_cross_attention(q, ks, vs, ko, vo, 1, 1).value();
        let scale = 1.0 / (2.0f64).sqrt();
        let s_self = (1.0 * 0.3 + (-0.5) * 0.8) * scale;
        let s_other = (1.0 * (-0.2) + (-0.5) * 0.4) * scale;
        let m = s_self.max(s_other);
        let (e0, e1) = ((s_self - m).exp(), (s_other - m).exp());
        let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        assert!((out[[0, 0, 0]] - (a0 * 2.0 + a1 * 0.5)).abs() < 1e-12);
        assert!((out[[1, 0, 0]] - (a0 * -1.0 + a1 * 3.0)).abs() < 1e-12);
    }

    #[test]
    fn uniform_keys_average_both_windows() {
        // identical keys ⇒ uniform attention over all 2·win² tokens
        let t: Tape<f64> = Tape::new();
        let d = 2;
        let q = t.leaf(test_array(&[d, 2, 2], 51, -1.0, 1.0));
        let ks = t.leaf(ndarray::ArrayD::zeros(IxDyn(&[d, 2, 2])));
        let ko = t.leaf(ndarray::ArrayD::zeros(IxDyn(&[d, 2, 2])));
        let vs = t.leaf(test_array(&[d, 2, 2], 52, -1.0, 1.0));
        let vo = t.leaf(test_array(&[d, 2, 2], 53, -1.0, 1.0));
        let out = window_cross_attention(q, ks, vs, ko, vo, 1, 2).value();
        let (vsv, vov) = (vs.value(), vo.value());
        for c in 0..d {
            let avg = (vsv.index_axis(ndarray::Axis(0), c).sum()
                + vov.index_axis(ndarray::Axis(0), c).sum())
                / 8.0;
            for y in 0..2 {
                for x in 0..2 {
                    assert!((out[[c, y, x]] - avg).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn windows_do_not_leak() {
        // perturbing a token in one window leaves other windows untouched
        let base = test_array(&[2, 4, 4], 54, -1.0, 1.0);
        let run = |vs_arr: ndarray::ArrayD<f64>| {
            let t: Tape<f64> = Tape::new();
            let q = t.leaf(test_array(&[2, 4, 4], 55, -1.0, 1.0));
            let ks = t.leaf(test_array(&[2, 4, 4], 56, -1.0, 1.0));
            let vs = t.leaf(vs_arr);
            let ko = t.leaf(test_array(&[2, 4, 4], 57, -1.0, 1.0));
            let vo = t.leaf(test_array(&[2, 4, 4], 58, -1.0, 1.0));
            window_cross_attention(q, ks, vs, ko, vo, 1, 2).value().clone()
        };
        let out0 = run(base.clone());
        let mut bumped = base;
        bumped[[0, 0, 0]] += 10.0; // window (0,0)
        let out1 = run(bumped);
        for y in 0..4 {
            for x in 0..4 {
                let same_window = y < 2 && x < 2;
                for c in 0..2 {
                    let moved = (out0[[c, y, x]] - out1[[c, y, x]]).abs() > 1e-9;
                    if !same_window {
                        assert!(!moved, "leak into ({y},{x})");
                    }
                }
            }
        }
    }

    #[test]
    fn attention_grads() {
        let mk = |seed| test_array(&[4, 4, 4], seed, -0.8, 0.8);
        fd_assert(
            |_t, xs| {
                let o = window_cross_attention(xs[0], xs[1], xs[2], xs[3], xs[4], 2, 2);
                mean(mul(o, o))
            },
            &[mk(61), mk(62), mk(63), mk(64), mk(65)],
            30,
            1e-5,
        );
    }
}
