//! Spatial resampling: flow-driven sampling, fixed ×2 scalers.

use crate::tape::{Element, Tx};
use ndarray::{Array3, Ix3};

#[inline]
fn clampf<E: Element>(v: E, hi: usize) -> (usize, usize, E, bool) {
    // Returns (i0, i1, frac, clamped) for bilinear taps along one axis.
    let hi_e = E::cast(hi as f64);
    let clamped = v < E::zero() || v > hi_e;
    let c = v.max(E::zero()).min(hi_e);
    let i0 = c.floor().as_f64() as usize;
    let i0 = i0.min(hi);
    let i1 = (i0 + 1).min(hi);
    (i0, i1, c - E::cast(i0 as f64), clamped)
}

/// Backward warp: `out[c, y, x] = src[c, y + fy(y,x), x + fx(y,x)]` with
/// bilinear sampling and border replication. `flow` is `(2, H, W)` with
/// channel 0 = dx, channel 1 = dy. Differentiable in both inputs; sampling
/// positions clamped to the border propagate no gradient into the flow.
pub fn grid_sample<'t, E: Element>(src: Tx<'t, E>, flow: Tx<'t, E>) -> Tx<'t, E> {
    let sv = src.value();
    let fv = flow.value();
    let s = sv.view().into_dimensionality::<Ix3>().expect("grid_sample: src (C,H,W)");
    let f = fv.view().into_dimensionality::<Ix3>().expect("grid_sample: flow (2,H,W)");
    let (c, h, w) = s.dim();
    assert_eq!(f.dim().0, 2, "grid_sample: flow must have 2 channels");
    assert_eq!((f.dim().1, f.dim().2), (h, w), "grid_sample: flow/src size mismatch");
    let mut out = Array3::<E>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let sx = E::cast(x as f64) + f[[0, y, x]];
            let sy = E::cast(y as f64) + f[[1, y, x]];
            let (x0, x1, wx, _) = clampf(sx, w - 1);
            let (y0, y1, wy, _) = clampf(sy, h - 1);
            for ci in 0..c {
                let v00 = s[[ci, y0, x0]];
                let v01 = s[[ci, y0, x1]];
                let v10 = s[[ci, y1, x0]];
                let v11 = s[[ci, y1, x1]];
                let top = v00 + wx * (v01 - v00);
                let bot = v10 + wx * (v11 - v10);
                out[[ci, y, x]] = top + wy * (bot - top);
            }
        }
    }
    let (is, ifl) = (src.id, flow.id);
    src.tape.push(
        out.into_dyn(),
        Some(Box::new(move |g| {
            let gv = g.view().into_dimensionality::<Ix3>().unwrap();
            let s = sv.view().into_dimensionality::<Ix3>().unwrap();
            let f = fv.view().into_dimensionality::<Ix3>().unwrap();
            let mut dsrc = Array3::<E>::zeros((c, h, w));
            let mut dflow = Array3::<E>::zeros((2, h, w));
            for y in 0..h {
                for x in 0..w {
                    let sx = E::cast(x as f64) + f[[0, y, x]];
                    let sy = E::cast(y as f64) + f[[1, y, x]];
                    let (x0, x1, wx, cx) = clampf(sx, w - 1);
                    let (y0, y1, wy, cy) = clampf(sy, h - 1);
                    let one = E::one();
                    let mut ddx = E::zero();
                    let mut ddy = E::zero();
                    for ci in 0..c {
                        let go = gv[[ci, y, x]];
                        let v00 = s[[ci, y0, x0]];
                        let v01 = s[[ci, y0, x1]];
                        let v10 = s[[ci, y1, x0]];
                        let v11 = s[[ci, y1, x1]];
                        dsrc[[ci, y0, x0]] = dsrc[[ci, y0, x0]] + go * (one - wx) * (one - wy);
                        dsrc[[ci, y0, x1]] = dsrc[[ci, y0, x1]] + go * wx * (one - wy);
                        dsrc[[ci, y1, x0]] = dsrc[[ci, y1, x0]] + go * (one - wx) * wy;
                        dsrc[[ci, y1, x1]] = dsrc[[ci, y1, x1]] + go * wx * wy;
                        ddx = ddx + go * ((one - wy) * (v01 - v00) + wy * (v11 - v10));
                        ddy = ddy + go * ((one - wx) * (v10 - v00) + wx * (v11 - v01));
                    }
                    if !cx {
                        dflow[[0, y, x]] = ddx;
                    }
                    if !cy {
                        dflow[[1, y, x]] = ddy;
                    }
                }
            }
            vec![(is, dsrc.into_dyn()), (ifl, dflow.into_dyn())]
        })),
    )
}

/// ×2 bilinear upsample of `(C, H, W)` (half-pixel-center convention):
/// output row `2r` reads source `r - 0.25`, row `2r + 1` reads `r + 0.25`.
pub fn bilinear_up2<'t, E: Element>(a: Tx<'t, E>) -> Tx<'t, E> {
    let av = a.value();
    let v = av.view().into_dimensionality::<Ix3>().expect("bilinear_up2: need (C,H,W)");
    let (c, h, w) = v.dim();
    let (ho, wo) = (2 * h, 2 * w);
    let taps = |o: usize, n: usize| -> (usize, usize, E) {
        let s = 0.5 * (o as f64 + 0.5) - 0.5;
        let sc = s.max(0.0).min((n - 1) as f64);
        let i0 = (sc.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, E::cast(sc - i0 as f64))
    };
    let mut out = Array3::<E>::zeros((c, ho, wo));
    for y in 0..ho {
        let (y0, y1, wy) = taps(y, h);
        for x in 0..wo {
            let (x0, x1, wx) = taps(x, w);
            for ci in 0..c {
                let top = v[[ci, y0, x0]] + wx * (v[[ci, y0, x1]] - v[[ci, y0, x0]]);
                let bot = v[[ci, y1, x0]] + wx * (v[[ci, y1, x1]] - v[[ci, y1, x0]]);
                out[[ci, y, x]] = top + wy * (bot - top);
            }
        }
    }
    let ia = a.id;
    a.tape.push(
        out.into_dyn(),
        Some(Box::new(move |g| {
            let gv = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut da = Array3::<E>::zeros((c, h, w));
            let one = E::one();
            for y in 0..ho {
                let (y0, y1, wy) = taps(y, h);
                for x in 0..wo {
                    let (x0, x1, wx) = taps(x, w);
                    for ci in 0..c {
                        let go = gv[[ci, y, x]];
                        da[[ci, y0, x0]] = da[[ci, y0, x0]] + go * (one - wx) * (one - wy);
                        da[[ci, y0, x1]] = da[[ci, y0, x1]] + go * wx * (one - wy);
                        da[[ci, y1, x0]] = da[[ci, y1, x0]] + go * (one - wx) * wy;
                        da[[ci, y1, x1]] = da[[ci, y1, x1]] + go * wx * wy;
                    }
                }
            }
            vec![(ia, da.into_dyn())]
        })),
    )
}

/// ×2 area downsample (2×2 mean); equals a half-pixel-center bilinear halving.
pub fn down2<'t, E: Element>(a: Tx<'t, E>) -> Tx<'t, E> {
    let av = a.value();
    let v = av.view().into_dimensionality::<Ix3>().expect("down2: need (C,H,W)");
    let (c, h, w) = v.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "down2: odd dims {h}x{w}");
    let (ho, wo) = (h / 2, w / 2);
    let q = E::cast(0.25);
    let mut out = Array3::<E>::zeros((c, ho, wo));
    for ci in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                out[[ci, y, x]] = (v[[ci, 2 * y, 2 * x]]
                    + v[[ci, 2 * y, 2 * x + 1]]
                    + v[[ci, 2 * y + 1, 2 * x]]
                    + v[[ci, 2 * y + 1, 2 * x + 1]])
                    * q;
            }
        }
    }
    let ia = a.id;
    a.tape.push(
        out.into_dyn(),
        Some(Box::new(move |g| {
            let gv = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut da = Array3::<E>::zeros((c, h, w));
            for ci in 0..c {
                for y in 0..ho {
                    for x in 0..wo {
                        let go = gv[[ci, y, x]] * q;
                        da[[ci, 2 * y, 2 * x]] = go;
                        da[[ci, 2 * y, 2 * x + 1]] = go;
                        da[[ci, 2 * y + 1, 2 * x]] = go;
                        da[[ci, 2 * y + 1, 2 * x + 1]] = go;
                    }
                }
            }
            vec![(ia, da.into_dyn())]
        })),
    )
}

/// Keep every second pixel: `(C, H, W)` → `(C, H/2, W/2)`.
pub fn subsample2<'t, E: Element>(a: Tx<'t, E>) -> Tx<'t, E> {
    let av = a.value();
    let v = av.view().into_dimensionality::<Ix3>().expect("subsample2: need (C,H,W)");
    let (c, h, w) = v.dim();
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Array3::<E>::zeros((c, ho, wo));
    for ci in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                out[[ci, y, x]] = v[[ci, 2 * y, 2 * x]];
            }
        }
    }
    let ia = a.id;
    a.tape.push(
        out.into_dyn(),
        Some(Box::new(move |g| {
            let gv = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut da = Array3::<E>::zeros((c, h, w));
            for ci in 0..c {
                for y in 0..ho {
                    for x in 0..wo {
                        da[[ci, 2 * y, 2 * x]] = gv[[ci, y, x]];
                    }
                }
            }
            vec![(ia, da.into_dyn())]
        })),
    )
}

/// Insert zeros at odd coordinates: `(C, H, W)` → `(C, 2H, 2W)`.
pub fn zero_stuff2<'t, E: Element>(a: Tx<'t, E>) -> Tx<'t, E> {
    let av = a.value();
    let v = av.view().into_dimensionality::<Ix3>().expect("zero_stuff2: need (C,H,W)");
    let (c, h, w) = v.dim();
    let mut out = Array3::<E>::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ci, 2 * y, 2 * x]] = v[[ci, y, x]];
            }
        }
    }
    let ia = a.id;
    a.tape.push(
        out.into_dyn(),
        Some(Box::new(move |g| {
            let gv = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut da = Array3::<E>::zeros((c, h, w));
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        da[[ci, y, x]] = gv[[ci, 2 * y, 2 * x]];
                    }
                }
            }
            vec![(ia, da.into_dyn())]
        })),
    )
}
