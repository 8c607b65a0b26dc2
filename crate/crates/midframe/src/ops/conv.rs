//! 2-D convolution via im2col + GEMM, with a direct path for depth-wise.
//!
//! Input `(Cin, H, W)`, weight `(Cout, Cin/groups, kh, kw)`, optional bias
//! `(Cout)`. Zero padding. `Same` keeps `ceil(in/stride)`; asymmetric pads put
//! the extra pixel at bottom/right.

use crate::tape::{Element, Tx};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView3, ArrayView4, Ix3, Ix4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2dCfg {
    pub stride: usize,
    pub padding: Padding,
    pub groups: usize,
}

impl Default for Conv2dCfg {
    fn default() -> Self {
        Conv2dCfg { stride: 1, padding: Padding::Same, groups: 1 }
    }
}

struct Geom {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    pt: usize,
    pl: usize,
    s: usize,
}

fn geometry(h: usize, w: usize, kh: usize, kw: usize, cfg: &Conv2dCfg) -> Geom {
    let s = cfg.stride;
    assert!(s == 1 || s == 2, "conv2d: stride must be 1 or 2");
    let (ho, wo, pt, pl) = match cfg.padding {
        Padding::Same => {
            let ho = h.div_ceil(s);
            let wo = w.div_ceil(s);
            let ph = ((ho - 1) * s + kh).saturating_sub(h);
            let pw = ((wo - 1) * s + kw).saturating_sub(w);
            (ho, wo, ph / 2, pw / 2)
        }
        Padding::Valid => {
            assert!(h >= kh && w >= kw, "conv2d: input smaller than kernel");
            ((h - kh) / s + 1, (w - kw) / s + 1, 0, 0)
        }
    };
    Geom { h, w, kh, kw, ho, wo, pt, pl, s }
}

/// Overlap of the kernel-offset column window with the valid input range:
/// output columns `lo..hi` read input columns `lo+off..hi+off`.
fn col_overlap(g: &Geom, kj: usize) -> (usize, usize, isize) {
    let off = kj as isize - g.pl as isize;
    let lo = (-off).max(0) as usize;
    let hi = ((g.w as isize - off).min(g.wo as isize)).max(0) as usize;
    (lo, hi.max(lo), off)
}

fn im2col<E: Element>(x: &ArrayView3<E>, c0: usize, cg: usize, g: &Geom) -> Array2<E> {
    let mut col = Array2::<E>::zeros((cg * g.kh * g.kw, g.ho * g.wo));
    let row_len = g.ho * g.wo;
    let cs = col.as_slice_mut().unwrap();
    for ci in 0..cg {
        let plane = x.index_axis(ndarray::Axis(0), c0 + ci);
        let ps = plane.to_slice();
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cs[row * row_len..(row + 1) * row_len];
                let (lo, hi, off) = col_overlap(g, kj);
                for oy in 0..g.ho {
                    let sy = (oy * g.s + ki) as isize - g.pt as isize;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let base = oy * g.wo;
                    if g.s == 1 {
                        if lo >= hi {
                            continue;
                        }
                        let s0 = (lo as isize + off) as usize;
                        match ps {
                            Some(ps) => {
                                let src = &ps[sy as usize * g.w + s0..][..hi - lo];
                                dst[base + lo..base + hi].copy_from_slice(src);
                            }
                            None => {
                                let src_row = plane.index_axis(ndarray::Axis(0), sy as usize);
                                for (d, s) in
                                    dst[base + lo..base + hi].iter_mut().zip(s0..s0 + hi - lo)
                                {
                                    *d = src_row[s];
                                }
                            }
                        }
                    } else {
                        let src_row = plane.index_axis(ndarray::Axis(0), sy as usize);
                        for ox in 0..g.wo {
                            let sx = (ox * g.s) as isize + off;
                            if sx >= 0 && sx < g.w as isize {
                                dst[base + ox] = src_row[sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im_add<E: Element>(dcol: &Array2<E>, dx: &mut Array3<E>, c0: usize, cg: usize, g: &Geom) {
    let row_len = g.ho * g.wo;
    let ds = dcol.as_slice().unwrap();
    for ci in 0..cg {
        let mut plane = dx.index_axis_mut(ndarray::Axis(0), c0 + ci);
        let pm = plane.as_slice_mut().unwrap();
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &ds[row * row_len..(row + 1) * row_len];
                let (lo, hi, off) = col_overlap(g, kj);
                for oy in 0..g.ho {
                    let sy = (oy * g.s + ki) as isize - g.pt as isize;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let base = oy * g.wo;
                    if g.s == 1 {
                        if lo >= hi {
                            continue;
                        }
                        let s0 = (lo as isize + off) as usize;
                        let drow = &mut pm[sy as usize * g.w + s0..][..hi - lo];
                        for (d, s) in drow.iter_mut().zip(&src[base + lo..base + hi]) {
                            *d = *d + *s;
                        }
                    } else {
                        for ox in 0..g.wo {
                            let sx = (ox * g.s) as isize + off;
                            if sx >= 0 && sx < g.w as isize {
                                let p = &mut pm[sy as usize * g.w + sx as usize];
                                *p = *p + src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dw_forward<E: Element>(x: &ArrayView3<E>, w: &ArrayView4<E>, g: &Geom, c: usize) -> Array3<E> {
    let mut out = Array3::<E>::zeros((c, g.ho, g.wo));
    let os = out.as_slice_mut().unwrap();
    for ci in 0..c {
        let plane = x.index_axis(ndarray::Axis(0), ci);
        let op = &mut os[ci * g.ho * g.wo..(ci + 1) * g.ho * g.wo];
        match plane.to_slice() {
            Some(ps) if g.s == 1 => {
                for ki in 0..g.kh {
                    let sy_off = ki as isize - g.pt as isize;
                    let oy_lo = (-sy_off).max(0) as usize;
                    let oy_hi = ((g.h as isize - sy_off).min(g.ho as isize)).max(0) as usize;
                    for kj in 0..g.kw {
                        let wt = w[[ci, 0, ki, kj]];
                        let (lo, hi, off) = col_overlap(g, kj);
                        if lo >= hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let sy = (oy as isize + sy_off) as usize;
                            let src = &ps[sy * g.w + (lo as isize + off) as usize..][..hi - lo];
                            let dst = &mut op[oy * g.wo + lo..oy * g.wo + hi];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d = *d + wt * *s;
                            }
                        }
                    }
                }
            }
            _ => {
                for ki in 0..g.kh {
                    let sy_off = ki as isize - g.pt as isize;
                    for kj in 0..g.kw {
                        let wt = w[[ci, 0, ki, kj]];
                        let sx_off = kj as isize - g.pl as isize;
                        for oy in 0..g.ho {
                            let sy = (oy * g.s) as isize + sy_off;
                            if sy < 0 || sy >= g.h as isize {
                                continue;
                            }
                            for ox in 0..g.wo {
                                let sx = (ox * g.s) as isize + sx_off;
                                if sx >= 0 && sx < g.w as isize {
                                    op[oy * g.wo + ox] = op[oy * g.wo + ox]
                                        + wt * plane[[sy as usize, sx as usize]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn dw_backward<E: Element>(
    x: &ArrayView3<E>,
    w: &ArrayView4<E>,
    gr: &ArrayView3<E>,
    g: &Geom,
    c: usize,
) -> (Array3<E>, ndarray::Array4<E>) {
    let mut dx = Array3::<E>::zeros((c, g.h, g.w));
    let mut dw = ndarray::Array4::<E>::zeros((c, 1, g.kh, g.kw));
    let dxs = dx.as_slice_mut().unwrap();
    for ci in 0..c {
        let plane = x.index_axis(ndarray::Axis(0), ci);
        let gplane = gr.index_axis(ndarray::Axis(0), ci);
        let dxp = &mut dxs[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        match (plane.to_slice(), gplane.to_slice()) {
            (Some(ps), Some(gs)) if g.s == 1 => {
                for ki in 0..g.kh {
                    let sy_off = ki as isize - g.pt as isize;
                    let oy_lo = (-sy_off).max(0) as usize;
                    let oy_hi = ((g.h as isize - sy_off).min(g.ho as isize)).max(0) as usize;
                    for kj in 0..g.kw {
                        let wt = w[[ci, 0, ki, kj]];
                        let (lo, hi, off) = col_overlap(g, kj);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = E::zero();
                        for oy in oy_lo..oy_hi {
                            let sy = (oy as isize + sy_off) as usize;
                            let s0 = sy * g.w + (lo as isize + off) as usize;
                            let src = &ps[s0..s0 + hi - lo];
                            let go = &gs[oy * g.wo + lo..oy * g.wo + hi];
                            let drow = &mut dxp[s0..s0 + hi - lo];
                            for (d, g0) in drow.iter_mut().zip(go) {
                                *d = *d + wt * *g0;
                            }
                            // 4-lane partial sums so the reduction vectorizes
                            let mut lanes = [E::zero(); 4];
                            let mut chunks = src.chunks_exact(4).zip(go.chunks_exact(4));
                            for (s4, g4) in &mut chunks {
                                for l in 0..4 {
                                    lanes[l] = lanes[l] + s4[l] * g4[l];
                                }
                            }
                            let n4 = src.len() / 4 * 4;
                            let mut dot = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
                            for (s, g0) in src[n4..].iter().zip(&go[n4..]) {
                                dot = dot + *s * *g0;
                            }
                            acc = acc + dot;
                        }
                        dw[[ci, 0, ki, kj]] = dw[[ci, 0, ki, kj]] + acc;
                    }
                }
            }
            _ => {
                for ki in 0..g.kh {
                    let sy_off = ki as isize - g.pt as isize;
                    for kj in 0..g.kw {
                        let wt = w[[ci, 0, ki, kj]];
                        let sx_off = kj as isize - g.pl as isize;
                        let mut acc = E::zero();
                        for oy in 0..g.ho {
                            let sy = (oy * g.s) as isize + sy_off;
                            if sy < 0 || sy >= g.h as isize {
                                continue;
                            }
                            for ox in 0..g.wo {
                                let sx = (ox * g.s) as isize + sx_off;
                                if sx >= 0 && sx < g.w as isize {
                                    let g0 = gplane[[oy, ox]];
                                    acc = acc + g0 * plane[[sy as usize, sx as usize]];
                                    let p = &mut dxp[sy as usize * g.w + sx as usize];
                                    *p = *p + wt * g0;
                                }
                            }
                        }
                        dw[[ci, 0, ki, kj]] = acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}

pub fn conv2d<'t, E: Element>(
    x: Tx<'t, E>,
    w: Tx<'t, E>,
    b: Option<Tx<'t, E>>,
    cfg: Conv2dCfg,
) -> Tx<'t, E> {
    let xv = x.value();
    let wv = w.value();
    let xd = xv.view().into_dimensionality::<Ix3>().expect("conv2d: x (Cin,H,W)");
    let wd = wv.view().into_dimensionality::<Ix4>().expect("conv2d: w (Cout,Cin/g,kh,kw)");
    let (cin, h, wi) = xd.dim();
    let (cout, cg, kh, kw) = wd.dim();
    let groups = cfg.groups;
    assert!(cin % groups == 0 && cout % groups == 0, "conv2d: groups must divide channels");
    assert_eq!(cg, cin / groups, "conv2d: weight in-channels {cg} != {}", cin / groups);
    let g = geometry(h, wi, kh, kw, &cfg);
    let depthwise = groups == cin && cin == cout && cg == 1;
    let pointwise = !depthwise && kh == 1 && kw == 1 && g.s == 1;
    let cog = cout / groups;

    let mut cols: Vec<Array2<E>> = Vec::new();
    let mut out = if depthwise {
        dw_forward(&xd, &wd, &g, cin)
    } else if pointwise {
        let n = g.ho * g.wo;
        let mut out = Array3::<E>::zeros((cout, g.ho, g.wo));
        for gi in 0..groups {
            let x2 = xd
                .slice(ndarray::s![gi * cg..(gi + 1) * cg, .., ..])
                .into_shape_with_order((cg, n))
                .unwrap();
            let w2 = wd
                .slice(ndarray::s![gi * cog..(gi + 1) * cog, .., .., ..])
                .into_shape_with_order((cog, cg))
                .unwrap();
            let mut o2 = Array2::<E>::zeros((cog, n));
            general_mat_mul(E::one(), &w2, &x2, E::zero(), &mut o2);
            out.slice_mut(ndarray::s![gi * cog..(gi + 1) * cog, .., ..])
                .assign(&o2.into_shape_with_order((cog, g.ho, g.wo)).unwrap());
        }
        out
    } else {
        let mut out = Array3::<E>::zeros((cout, g.ho, g.wo));
        for gi in 0..groups {
            let col = im2col(&xd, gi * cg, cg, &g);
            let w2 = wd
                .slice(ndarray::s![gi * cog..(gi + 1) * cog, .., .., ..])
                .into_shape_with_order((cog, cg * kh * kw))
                .unwrap();
            let mut o2 = Array2::<E>::zeros((cog, g.ho * g.wo));
            general_mat_mul(E::one(), &w2, &col, E::zero(), &mut o2);
            out.slice_mut(ndarray::s![gi * cog..(gi + 1) * cog, .., ..])
                .assign(&o2.into_shape_with_order((cog, g.ho, g.wo)).unwrap());
            cols.push(col);
        }
        out
    };

    let bv = b.map(|bb| bb.value());
    if let Some(bv) = &bv {
        assert_eq!(bv.len(), cout, "conv2d: bias length");
        for ci in 0..cout {
            let bc = bv[[ci]];
            out.index_axis_mut(ndarray::Axis(0), ci).mapv_inplace(|v| v + bc);
        }
    }

    let (ix, iw, ib) = (x.id, w.id, b.map(|bb| bb.id));
    x.tape.push(
        out.into_dyn(),
        Some(Box::new(move |grad| {
            let gr = grad.view().into_dimensionality::<Ix3>().unwrap();
            let xd = xv.view().into_dimensionality::<Ix3>().unwrap();
            let wd = wv.view().into_dimensionality::<Ix4>().unwrap();
            let mut res = Vec::with_capacity(3);
            if depthwise {
                let (dx, dw) = dw_backward(&xd, &wd, &gr, &g, cin);
                res.push((ix, dx.into_dyn()));
                res.push((iw, dw.into_dyn()));
            } else if pointwise {
                let n = g.ho * g.wo;
                let mut dx = Array3::<E>::zeros((cin, h, wi));
                let mut dw = ndarray::Array4::<E>::zeros((cout, cg, kh, kw));
                for gi in 0..groups {
                    let g2 = gr
                        .slice(ndarray::s![gi * cog..(gi + 1) * cog, .., ..])
                        .into_shape_with_order((cog, n))
                        .unwrap();
                    let x2 = xd
                        .slice(ndarray::s![gi * cg..(gi + 1) * cg, .., ..])
                        .into_shape_with_order((cg, n))
                        .unwrap();
                    let w2 = wd
                        .slice(ndarray::s![gi * cog..(gi + 1) * cog, .., .., ..])
                        .into_shape_with_order((cog, cg))
                        .unwrap();
                    let mut dw2 = dw
                        .slice_mut(ndarray::s![gi * cog..(gi + 1) * cog, .., .., ..])
                        .into_shape_with_order((cog, cg))
                        .unwrap();
                    general_mat_mul(E::one(), &g2, &x2.t(), E::zero(), &mut dw2);
                    let mut dx2 = dx
                        .slice_mut(ndarray::s![gi * cg..(gi + 1) * cg, .., ..])
                        .into_shape_with_order((cg, n))
                        .unwrap();
                    general_mat_mul(E::one(), &w2.t(), &g2, E::zero(), &mut dx2);
                }
                res.push((ix, dx.into_dyn()));
                res.push((iw, dw.into_dyn()));
            } else {
                let mut dx = Array3::<E>::zeros((cin, h, wi));
                let mut dw = ndarray::Array4::<E>::zeros((cout, cg, kh, kw));
                for (gi, col) in cols.iter().enumerate() {
                    let g2 = gr
                        .slice(ndarray::s![gi * cog..(gi + 1) * cog, .., ..])
                        .into_shape_with_order((cog, g.ho * g.wo))
                        .unwrap();
                    // dW = dY · col^T
                    let mut dw2 = Array2::<E>::zeros((cog, cg * kh * kw));
                    general_mat_mul(E::one(), &g2, &col.t(), E::zero(), &mut dw2);
                    dw.slice_mut(ndarray::s![gi * cog..(gi + 1) * cog, .., .., ..])
                        .assign(&dw2.into_shape_with_order((cog, cg, kh, kw)).unwrap());
                    // dX = col2im(W^T · dY)
                    let w2 = wd
                        .slice(ndarray::s![gi * cog..(gi + 1) * cog, .., .., ..])
                        .into_shape_with_order((cog, cg * kh * kw))
                        .unwrap();
                    let mut dcol = Array2::<E>::zeros((cg * kh * kw, g.ho * g.wo));
                    general_mat_mul(E::one(), &w2.t(), &g2, E::zero(), &mut dcol);
                    col2im_add(&dcol, &mut dx, gi * cg, cg, &g);
                }
                res.push((ix, dx.into_dyn()));
                res.push((iw, dw.into_dyn()));
            }
            if let Some(ib) = ib {
                let mut db = ndarray::Array1::<E>::zeros(cout);
                for ci in 0..cout {
                    db[ci] = gr.index_axis(ndarray::Axis(0), ci).sum();
                }
                res.push((ib, db.into_dyn()));
            }
            res
        })),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_assert, test_array};
    use crate::ops::{mean, mul};
    use crate::tape::Tape;
    use ndarray::ArrayD;

    fn naive_conv(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        b: Option<&ArrayD<f64>>,
        cfg: Conv2dCfg,
    ) -> ArrayD<f64> {
        let (_cin, h, wi) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let s = cfg.stride;
        let (ho, wo, pt, pl) = match cfg.padding {
            Padding::Same => {
                let ho = h.div_ceil(s);
                let wo = wi.div_ceil(s);
                (ho, wo, ((ho - 1) * s + kh).saturating_sub(h) / 2, ((wo - 1) * s + kw).saturating_sub(wi) / 2)
            }
            Padding::Valid => ((h - kh) / s + 1, (wi - kw) / s + 1, 0, 0),
        };
        let cog = cout / cfg.groups;
        let mut out = ArrayD::zeros(ndarray::IxDyn(&[cout, ho, wo]));
        for co in 0..cout {
            let gi = co / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |bb| bb[[co]]);
                    for ci in 0..cg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let sy = (oy * s + ky) as isize - pt as isize;
                                let sx = (ox * s + kx) as isize - pl as isize;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < wi as isize {
                                    acc += w[[co, ci, ky, kx]]
                                        * x[[gi * cg + ci, sy as usize, sx as usize]];
                                }
                            }
                        }
                    }
                    out[[co, oy, ox]] = acc;
                }
            }
        }
        out
    }

    fn compare_against_naive(xs: &[usize], ws: &[usize], cfg: Conv2dCfg, with_bias: bool) {
        let x = test_array(xs, 31, -1.0, 1.0);
        let w = test_array(ws, 32, -0.5, 0.5);
        let b = with_bias.then(|| test_array(&[ws[0]], 33, -0.2, 0.2));
        let want = naive_conv(&x, &w, b.as_ref(), cfg);
        let t: Tape<f64> = Tape::new();
        let tx = t.leaf(x);
        let tw = t.leaf(w);
        let tb = b.map(|bb| t.leaf(bb));
        let got = conv2d(tx, tw, tb, cfg).value();
        assert_eq!(got.shape(), want.shape());
        for (a, e) in got.iter().zip(want.iter()) {
            assert!((a - e).abs() < 1e-12, "conv mismatch: {a} vs {e}");
        }
    }

    #[test]
    fn conv_matches_naive_reference() {
        let same = |groups| Conv2dCfg { stride: 1, padding: Padding::Same, groups };
        compare_against_naive(&[3, 6, 7], &[4, 3, 3, 3], same(1), true);
        compare_against_naive(&[3, 6, 7], &[4, 3, 3, 3], Conv2dCfg { stride: 2, padding: Padding::Same, groups: 1 }, true);
        compare_against_naive(&[2, 8, 8], &[3, 2, 5, 5], Conv2dCfg { stride: 1, padding: Padding::Valid, groups: 1 }, false);
        compare_against_naive(&[2, 6, 6], &[2, 2, 1, 5], same(1), false);
        compare_against_naive(&[2, 6, 6], &[2, 2, 5, 1], same(1), false);
        compare_against_naive(&[3, 8, 9], &[3, 1, 7, 7], same(3), true); // depth-wise path
        compare_against_naive(&[4, 5, 5], &[6, 2, 3, 3], same(2), true); // grouped
        compare_against_naive(&[3, 7, 7], &[3, 1, 7, 7], Conv2dCfg { stride: 2, padding: Padding::Same, groups: 3 }, false);
    }

    #[test]
    fn same_padding_output_sizes() {
        let t: Tape<f64> = Tape::new();
        let x = t.leaf(test_array(&[1, 9, 10], 34, 0.0, 1.0));
        let w = t.leaf(test_array(&[1, 1, 3, 3], 35, 0.0, 1.0));
        let y = conv2d(x, w, None, Conv2dCfg { stride: 2, padding: Padding::Same, groups: 1 });
        assert_eq!(y.shape(), vec![1, 5, 5]);
        let w5 = t.leaf(test_array(&[2, 1, 5, 5], 36, 0.0, 1.0));
        let y5 = conv2d(x, w5, None, Conv2dCfg::default());
        assert_eq!(y5.shape(), vec![2, 9, 10]);
    }

    #[test]
    fn conv_grads_standard() {
        let x = test_array(&[2, 5, 5], 37, -1.0, 1.0);
        let w = test_array(&[3, 2, 3, 3], 38, -0.5, 0.5);
        let b = test_array(&[3], 39, -0.2, 0.2);
        fd_assert(
            |_t, xs| {
                let y = conv2d(xs[0], xs[1], Some(xs[2]), Conv2dCfg::default());
                mean(mul(y, y))
            },
            &[x, w, b],
            40,
            1e-5,
        );
    }

    #[test]
    fn conv_grads_strided_and_valid() {
        let x = test_array(&[2, 6, 6], 40, -1.0, 1.0);
        let w = test_array(&[2, 2, 3, 3], 41, -0.5, 0.5);
        fd_assert(
            |_t, xs| {
                let y = conv2d(xs[0], xs[1], None, Conv2dCfg { stride: 2, padding: Padding::Same, groups: 1 });
                mean(mul(y, y))
            },
            &[x.clone(), w.clone()],
            40,
            1e-5,
        );
        fd_assert(
            |_t, xs| {
                let y = conv2d(xs[0], xs[1], None, Conv2dCfg { stride: 1, padding: Padding::Valid, groups: 1 });
                mean(mul(y, y))
            },
            &[x, w],
            40,
            1e-5,
        );
    }

    #[test]
    fn conv_grads_depthwise_and_grouped() {
        let x = test_array(&[3, 6, 6], 42, -1.0, 1.0);
        let w = test_array(&[3, 1, 5, 5], 43, -0.5, 0.5);
        let b = test_array(&[3], 44, -0.2, 0.2);
        fd_assert(
            |_t, xs| {
                let y = conv2d(xs[0], xs[1], Some(xs[2]), Conv2dCfg { stride: 1, padding: Padding::Same, groups: 3 });
                mean(mul(y, y))
            },
            &[x, w, b],
            40,
            1e-5,
        );
        let x = test_array(&[4, 5, 5], 45, -1.0, 1.0);
        let w = test_array(&[6, 2, 3, 3], 46, -0.5, 0.5);
        fd_assert(
            |_t, xs| {
                let y = conv2d(xs[0], xs[1], None, Conv2dCfg { stride: 1, padding: Padding::Same, groups: 2 });
                mean(mul(y, y))
            },
            &[x, w],
            40,
            1e-5,
        );
    }

    #[test]
    fn bias_reaches_every_output_position() {
        let t: Tape<f64> = Tape::new();
        let x = t.leaf(ArrayD::zeros(ndarray::IxDyn(&[1, 4, 4])));
        let w = t.leaf(ArrayD::zeros(ndarray::IxDyn(&[2, 1, 3, 3])));
        let b = t.leaf(ndarray::arr1(&[0.5, -1.5]).into_dyn());
        let y = conv2d(x, w, Some(b), Conv2dCfg::default()).value();
        for yv in y.index_axis(ndarray::Axis(0), 0).iter() {
            assert_eq!(*yv, 0.5);
        }
        for yv in y.index_axis(ndarray::Axis(0), 1).iter() {
            assert_eq!(*yv, -1.5);
        }
    }
}
