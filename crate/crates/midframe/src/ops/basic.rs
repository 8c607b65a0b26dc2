//! Elementwise ops, reductions, channel plumbing, padding.

use crate::tape::{Element, Tx};
use ndarray::{ArrayD, Axis, Ix3, IxDyn, Slice, Zip};

pub fn add<'t, E: Element>(a: Tx<'t, E>, b: Tx<'t, E>) -> Tx<'t, E> {
    let (av, bv) = (a.value(), b.value());
    assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
    let out = &*av + &*bv;
    let (ia, ib) = (a.id, b.id);
    a.tape.push(out, Some(Box::new(move |g| vec![(ia, g.clone()), (ib, g.clone())])))
}

pub fn sub<'t, E: Element>(a: Tx<'t, E>, b: Tx<'t, E>) -> Tx<'t, E> {
    let (av, bv) = (a.value(), b.value());
    assert_eq!(av.shape(), bv.shape(), "sub: shape mismatch");
    let out = &*av - &*bv;
    let (ia, ib) = (a.id, b.id);
    a.tape.push(out, Some(Box::new(move |g| vec![(ia, g.clone()), (ib, g.mapv(|x| -x))])))
}

pub fn mul<'t, E: Element>(a: Tx<'t, E>, b: Tx<'t, E>) -> Tx<'t, E> {
    let (av, bv) = (a.value(), b.value());
    assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
    let out = &*av * &*bv;
    let (ia, ib) = (a.id, b.id);
    a.tape.push(
        out,
        Some(Box::new(move |g| vec![(ia, g * &*bv), (ib, g * &*av)])),
    )
}

pub fn scale<'t, E: Element>(a: Tx<'t, E>, c: f64) -> Tx<'t, E> {
    let av = a.value();
    let c = E::cast(c);
    let out = av.mapv(|x| x * c);
    let ia = a.id;
    a.tape.push(out, Some(Box::new(move |g| vec![(ia, g.mapv(|x| x * c))])))
}

pub fn add_scalar<'t, E: Element>(a: Tx<'t, E>, c: f64) -> Tx<'t, E> {
    let av = a.value();
    let c = E::cast(c);
    let out = av.mapv(|x| x + c);
    let ia = a.id;
    a.tape.push(out, Some(Box::new(move |g| vec![(ia, g.clone())])))
}

pub fn leaky_relu<'t, E: Element>(a: Tx<'t, E>, slope: f64) -> Tx<'t, E> {
    let av = a.value();
    let s = E::cast(slope);
    let out = av.mapv(|x| if x > E::zero() { x } else { x * s });
    let ia = a.id;
    a.tape.push(
        out,
        Some(Box::new(move |g| {
            let mut dg = g.clone();
            Zip::from(&mut dg).and(&*av).for_each(|d, &x| {
                if x <= E::zero() {
                    *d = *d * s;
                }
            });
            vec![(ia, dg)]
        })),
    )
}

pub fn sigmoid<'t, E: Element>(a: Tx<'t, E>) -> Tx<'t, E> {
    let av = a.value();
    let out = av.mapv(|x| E::one() / (E::one() + (-x).exp()));
    let ia = a.id;
    let y = out.clone();
    a.tape.push(
        out,
        Some(Box::new(move |g| {
            let mut dg = g.clone();
            Zip::from(&mut dg).and(&y).for_each(|d, &y| *d = *d * y * (E::one() - y));
            vec![(ia, dg)]
        })),
    )
}

/// Clamp to [0,1]; gradient is zero where the input lies outside.
pub fn clamp01<'t, E: Element>(a: Tx<'t, E>) -> Tx<'t, E> {
    let av = a.value();
    let out = av.mapv(|x| {
        if x < E::zero() {
            E::zero()
        } else if x > E::one() {
            E::one()
        } else {
            x
        }
    });
    let ia = a.id;
    a.tape.push(
        out,
        Some(Box::new(move |g| {
            let mut dg = g.clone();
            Zip::from(&mut dg).and(&*av).for_each(|d, &x| {
                if x < E::zero() || x > E::one() {
                    *d = E::zero();
                }
            });
            vec![(ia, dg)]
        })),
    )
}

/// Mean over all elements; scalar shaped `[1]`. Accumulates in `f64`.
pub fn mean<'t, E: Element>(a: Tx<'t, E>) -> Tx<'t, E> {
    let av = a.value();
    let n = av.len();
    let inv = E::cast(1.0 / n as f64);
    let s = E::cast(av.iter().fold(0.0f64, |acc, &x| acc + x.as_f64()) / n as f64);
    let ia = a.id;
    let shape = av.shape().to_vec();
    a.tape.push(
        ArrayD::from_elem(IxDyn(&[1]), s),
        Some(Box::new(move |g| {
            let go = g[[0]] * inv;
            vec![(ia, ArrayD::from_elem(IxDyn(&shape), go))]
        })),
    )
}

/// Mean of |x| over all elements; scalar shaped `[1]`. Subgradient 0 at 0.
pub fn mean_abs<'t, E: Element>(a: Tx<'t, E>) -> Tx<'t, E> {
    let av = a.value();
    let n = av.len();
    let inv = E::cast(1.0 / n as f64);
    let s = E::cast(av.iter().fold(0.0f64, |acc, &x| acc + x.abs().as_f64()) / n as f64);
    let ia = a.id;
    a.tape.push(
        ArrayD::from_elem(IxDyn(&[1]), s),
        Some(Box::new(move |g| {
            let go = g[[0]] * inv;
            let dg = av.mapv(|x| {
                if x > E::zero() {
                    go
                } else if x < E::zero() {
                    -go
                } else {
                    E::zero()
                }
            });
            vec![(ia, dg)]
        })),
    )
}

/// Mean of `sqrt((a-b)^2 + eps^2)` over all elements; scalar shaped `[1]`.
pub fn charbonnier_mean<'t, E: Element>(a: Tx<'t, E>, b: Tx<'t, E>, eps: f64) -> Tx<'t, E> {
    let (av, bv) = (a.value(), b.value());
    assert_eq!(av.shape(), bv.shape(), "charbonnier: shape mismatch");
    let e2 = E::cast(eps * eps);
    let n = av.len();
    let inv = E::cast(1.0 / n as f64);
    let mut s = 0.0f64;
    let mut root = ArrayD::zeros(av.raw_dim());
    Zip::from(&mut root).and(&*av).and(&*bv).for_each(|r, &x, &y| {
        let d = x - y;
        *r = (d * d + e2).sqrt();
        s += (*r).as_f64();
    });
    let (ia, ib) = (a.id, b.id);
    a.tape.push(
        ArrayD::from_elem(IxDyn(&[1]), E::cast(s / n as f64)),
        Some(Box::new(move |g| {
            let go = g[[0]] * inv;
            let mut da = ArrayD::zeros(av.raw_dim());
            Zip::from(&mut da).and(&*av).and(&*bv).and(&root).for_each(|d, &x, &y, &r| {
                *d = go * (x - y) / r;
            });
            let db = da.mapv(|x| -x);
            vec![(ia, da), (ib, db)]
        })),
    )
}

pub fn concat_ch<'t, E: Element>(parts: &[Tx<'t, E>]) -> Tx<'t, E> {
    assert!(!parts.is_empty());
    let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
    let out = ndarray::concatenate(Axis(0), &views).expect("concat_ch: incompatible shapes");
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let chs: Vec<usize> = vals.iter().map(|v| v.shape()[0]).collect();
    parts[0].tape.push(
        out,
        Some(Box::new(move |g| {
            let mut res = Vec::with_capacity(ids.len());
            let mut at = 0;
            for (i, &c) in chs.iter().enumerate() {
                let part = g.slice_axis(Axis(0), Slice::from(at..at + c)).to_owned();
                res.push((ids[i], part));
                at += c;
            }
            res
        })),
    )
}

pub fn slice_ch<'t, E: Element>(a: Tx<'t, E>, from: usize, to: usize) -> Tx<'t, E> {
    let av = a.value();
    let c = av.shape()[0];
    assert!(from < to && to <= c, "slice_ch: bad range {from}..{to} of {c}");
    let out = av.slice_axis(Axis(0), Slice::from(from..to)).to_owned();
    let ia = a.id;
    let shape = av.shape().to_vec();
    a.tape.push(
        out,
        Some(Box::new(move |g| {
            let mut full = ArrayD::zeros(IxDyn(&shape));
            full.slice_axis_mut(Axis(0), Slice::from(from..to)).assign(g);
            vec![(ia, full)]
        })),
    )
}

/// Border-replicating pad of a `(C, H, W)` map: `(top, bottom, left, right)`.
pub fn replicate_pad<'t, E: Element>(a: Tx<'t, E>, pad: (usize, usize, usize, usize)) -> Tx<'t, E> {
    let av = a.value();
    let v = av.view().into_dimensionality::<Ix3>().expect("replicate_pad: need (C,H,W)");
    let (c, h, w) = v.dim();
    let (t, b, l, r) = pad;
    let (ho, wo) = (h + t + b, w + l + r);
    let mut out = ndarray::Array3::<E>::zeros((c, ho, wo));
    for ci in 0..c {
        for y in 0..ho {
            let sy = y.saturating_sub(t).min(h - 1);
            for x in 0..wo {
                let sx = x.saturating_sub(l).min(w - 1);
                out[[ci, y, x]] = v[[ci, sy, sx]];
            }
        }
    }
    let ia = a.id;
    a.tape.push(
        out.into_dyn(),
        Some(Box::new(move |g| {
            let gv = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut da = ndarray::Array3::<E>::zeros((c, h, w));
            for ci in 0..c {
                for y in 0..ho {
                    let sy = y.saturating_sub(t).min(h - 1);
                    for x in 0..wo {
                        let sx = x.saturating_sub(l).min(w - 1);
                        da[[ci, sy, sx]] = da[[ci, sy, sx]] + gv[[ci, y, x]];
                    }
                }
            }
            vec![(ia, da.into_dyn())]
        })),
    )
}

/// Crop a `(C, H, W)` map to `rows.start..rows.end`, `cols.start..cols.end`.
pub fn crop<'t, E: Element>(
    a: Tx<'t, E>,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> Tx<'t, E> {
    let av = a.value();
    let v = av.view().into_dimensionality::<Ix3>().expect("crop: need (C,H,W)");
    let (c, h, w) = v.dim();
    assert!(rows.end <= h && cols.end <= w, "crop: out of bounds");
    let out = v
        .slice_axis(Axis(1), Slice::from(rows.clone()))
        .slice_axis(Axis(2), Slice::from(cols.clone()))
        .to_owned();
    let ia = a.id;
    a.tape.push(
        out.into_dyn(),
        Some(Box::new(move |g| {
            let gv = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut da = ndarray::Array3::<E>::zeros((c, h, w));
            da.slice_axis_mut(Axis(1), Slice::from(rows.clone()))
                .slice_axis_mut(Axis(2), Slice::from(cols.clone()))
                .assign(&gv);
            vec![(ia, da.into_dyn())]
        })),
    )
}

/// Layer norm across the channel axis at each spatial position, with affine
/// parameters `gamma`, `beta` shaped `(C)`.
pub fn layer_norm_ch<'t, E: Element>(x: Tx<'t, E>, gamma: Tx<'t, E>, beta: Tx<'t, E>) -> Tx<'t, E> {
    let xv = x.value();
    let gv = gamma.value();
    let bv = beta.value();
    let v = xv.view().into_dimensionality::<Ix3>().expect("layer_norm_ch: need (C,H,W)");
    let (c, h, w) = v.dim();
    assert_eq!(gv.len(), c);
    assert_eq!(bv.len(), c);
    let eps = E::cast(1e-5);
    let invc = E::cast(1.0 / c as f64);
    let mut xhat = ndarray::Array3::<E>::zeros((c, h, w));
    let mut istd = ndarray::Array2::<E>::zeros((h, w));
    let mut out = ndarray::Array3::<E>::zeros((c, h, w));
    for y in 0..h {
        for xx in 0..w {
            let mut mu = E::zero();
            for ci in 0..c {
                mu = mu + v[[ci, y, xx]];
            }
            mu = mu * invc;
            let mut var = E::zero();
            for ci in 0..c {
                let d = v[[ci, y, xx]] - mu;
                var = var + d * d;
            }
            var = var * invc;
            let is = E::one() / (var + eps).sqrt();
            istd[[y, xx]] = is;
            for ci in 0..c {
                let xh = (v[[ci, y, xx]] - mu) * is;
                xhat[[ci, y, xx]] = xh;
                out[[ci, y, xx]] = gv[[ci]] * xh + bv[[ci]];
            }
        }
    }
    let (ix, ig, ib) = (x.id, gamma.id, beta.id);
    x.tape.push(
        out.into_dyn(),
        Some(Box::new(move |g| {
            let gr = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut dx = ndarray::Array3::<E>::zeros((c, h, w));
            let mut dgamma = ArrayD::zeros(IxDyn(&[c]));
            let mut dbeta = ArrayD::zeros(IxDyn(&[c]));
            for y in 0..h {
                for xx in 0..w {
                    let mut m1 = E::zero(); // mean of gamma*g
                    let mut m2 = E::zero(); // mean of gamma*g*xhat
                    for ci in 0..c {
                        let gg = gv[[ci]] * gr[[ci, y, xx]];
                        m1 = m1 + gg;
                        m2 = m2 + gg * xhat[[ci, y, xx]];
                        dgamma[[ci]] = dgamma[[ci]] + gr[[ci, y, xx]] * xhat[[ci, y, xx]];
                        dbeta[[ci]] = dbeta[[ci]] + gr[[ci, y, xx]];
                    }
                    m1 = m1 * invc;
                    m2 = m2 * invc;
                    let is = istd[[y, xx]];
                    for ci in 0..c {
                        let gg = gv[[ci]] * gr[[ci, y, xx]];
                        dx[[ci, y, xx]] = (gg - m1 - xhat[[ci, y, xx]] * m2) * is;
                    }
                }
            }
            vec![(ix, dx.into_dyn()), (ig, dgamma), (ib, dbeta)]
        })),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_assert, test_array};
    use crate::tape::Tape;

    fn signed_away_from_zero(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut x = test_array::<f64>(shape, seed, 0.15, 1.0);
        let mut i = 0usize;
        x.mapv_inplace(|v| {
            i += 1;
            if i % 2 == 0 {
                -v
            } else {
                v
            }
        });
        x
    }

    #[test]
    fn arithmetic_grads() {
        let a = test_array(&[2, 3, 4], 1, -1.0, 1.0);
        let b = test_array(&[2, 3, 4], 2, -1.0, 1.0);
        fd_assert(
            |_t, xs| mean(mul(add(xs[0], xs[1]), sub(xs[0], scale(xs[1], 0.7)))),
            &[a, b],
            30,
            1e-6,
        );
    }

    #[test]
    fn activation_grads() {
        let x = signed_away_from_zero(&[2, 4, 4], 3);
        fd_assert(|_t, xs| mean(leaky_relu(xs[0], 0.1)), &[x.clone()], 30, 1e-6);
        fd_assert(|_t, xs| mean(sigmoid(xs[0])), &[x], 30, 1e-6);
    }

    #[test]
    fn reduction_grads() {
        let x = signed_away_from_zero(&[2, 3, 4], 4);
        let y = test_array(&[2, 3, 4], 5, -1.0, 1.0);
        fd_assert(|_t, xs| mean_abs(xs[0]), &[x.clone()], 30, 1e-6);
        fd_assert(|_t, xs| charbonnier_mean(xs[0], xs[1], 0.05), &[x, y], 30, 1e-6);
        fd_assert(|_t, xs| add_scalar(mean(xs[0]), 0.5), &[test_array(&[2, 3, 4], 6, -1.0, 1.0)], 20, 1e-6);
    }

    #[test]
    fn charbonnier_of_identical_inputs_is_eps() {
        let t: Tape<f64> = Tape::new();
        let v = test_array(&[3, 5, 5], 7, 0.0, 1.0);
        let a = t.leaf(v.clone());
        let b = t.leaf(v);
        let l = charbonnier_mean(a, b, 1e-6);
        assert!((l.value()[[0]] - 1e-6).abs() < 1e-18);

        // at the runtime element type the floor is bit-exact
        let t32: Tape<f32> = Tape::new();
        let v32 = test_array::<f32>(&[3, 5, 5], 7, 0.0, 1.0);
        let a = t32.leaf(v32.clone());
        let b = t32.leaf(v32);
        let l = charbonnier_mean(a, b, 1e-6);
        assert_eq!(l.value()[[0]], 1e-6f32);
    }

    #[test]
    fn channel_plumbing_grads() {
        let a = test_array(&[2, 3, 3], 8, -1.0, 1.0);
        let b = test_array(&[1, 3, 3], 9, -1.0, 1.0);
        let c = test_array(&[3, 3, 3], 10, -1.0, 1.0);
        fd_assert(
            |_t, xs| {
                let cat = concat_ch(&[xs[0], xs[1], xs[2]]);
                mean(mul(slice_ch(cat, 1, 4), slice_ch(cat, 2, 5)))
            },
            &[a, b, c],
            30,
            1e-6,
        );
    }

    #[test]
    fn pad_and_crop_grads() {
        let x = test_array(&[2, 4, 5], 11, -1.0, 1.0);
        fd_assert(
            |_t, xs| {
                let p = replicate_pad(xs[0], (2, 1, 0, 3));
                mean(mul(p, p))
            },
            &[x.clone()],
            30,
            1e-6,
        );
        fd_assert(
            |_t, xs| {
                let cr = crop(xs[0], 1..3, 2..5);
                mean(mul(cr, cr))
            },
            &[x],
            30,
            1e-6,
        );
    }

    #[test]
    fn crop_takes_requested_window() {
        let t: Tape<f64> = Tape::new();
        let v = ArrayD::from_shape_fn(IxDyn(&[1, 3, 4]), |ix| (ix[1] * 10 + ix[2]) as f64);
        let x = t.leaf(v);
        let c = crop(x, 1..3, 1..3);
        assert_eq!(c.shape(), vec![1, 2, 2]);
        let cv = c.value();
        assert_eq!(cv[[0, 0, 0]], 11.0);
        assert_eq!(cv[[0, 1, 1]], 22.0);
    }

    #[test]
    fn layer_norm_grads() {
        let x = test_array(&[4, 3, 3], 12, -1.0, 1.0);
        let gamma = test_array(&[4], 13, 0.5, 1.5);
        let beta = test_array(&[4], 14, -0.3, 0.3);
        fd_assert(
            |_t, xs| mean(mul(layer_norm_ch(xs[0], xs[1], xs[2]), xs[0])),
            &[x, gamma, beta],
            40,
            1e-5,
        );
    }

    #[test]
    fn layer_norm_normalizes_each_position() {
        let t: Tape<f64> = Tape::new();
        let x = t.leaf(test_array(&[8, 2, 2], 15, -2.0, 2.0));
        let gamma = t.leaf(ArrayD::ones(IxDyn(&[8])));
        let beta = t.leaf(ArrayD::zeros(IxDyn(&[8])));
        let y = layer_norm_ch(x, gamma, beta);
        let yv = y.value();
        for py in 0..2 {
            for px in 0..2 {
                let mut mu = 0.0;
                let mut var = 0.0;
                for c in 0..8 {
                    mu += yv[[c, py, px]];
                }
                mu /= 8.0;
                for c in 0..8 {
                    var += (yv[[c, py, px]] - mu).powi(2);
                }
                var /= 8.0;
                assert!(mu.abs() < 1e-9);
                assert!((var - 1.0).abs() < 1e-4);
            }
        }
    }
}
