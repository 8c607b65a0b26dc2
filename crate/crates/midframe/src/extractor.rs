//! Five-level per-frame feature pyramids.
//!
//! Levels 0–2 are plain strided conv blocks applied to each frame
//! independently; levels 3–4 interleave the frames through windowed
//! cross-attention so each frame's features can attend to the other's.
//! All weights are shared between the two frames.

use crate::config::ModelConfig;
use crate::ops::{
    crop, leaky_relu, replicate_pad, window_cross_attention, Conv2dCfg,
};
use crate::params::TapedParams;
use crate::tape::{Element, Tx};

pub const LEAK: f64 = 0.1;
const WIN: usize = 8;

/// Record of replication padding applied to reach a size multiple.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CropRec {
    pub rows: usize,
    pub cols: usize,
}

/// Replication-pad `x` (bottom/right) so spatial dims are multiples of
/// `multiple`, returning the crop record that undoes it.
pub fn pad_to_multiple<'t, E: Element>(
    x: Tx<'t, E>,
    multiple: usize,
) -> (Tx<'t, E>, CropRec) {
    let sh = x.shape();
    let (h, w) = (sh[1], sh[2]);
    let ph = (multiple - h % multiple) % multiple;
    let pw = (multiple - w % multiple) % multiple;
    let rec = CropRec { rows: h, cols: w };
    if ph == 0 && pw == 0 {
        return (x, rec);
    }
    (replicate_pad(x, (0, ph, 0, pw)), rec)
}

/// Crop a map (any channel count) back to the recorded size.
pub fn crop_back<'t, E: Element>(x: Tx<'t, E>, rec: CropRec) -> Tx<'t, E> {
    let sh = x.shape();
    if sh[1] == rec.rows && sh[2] == rec.cols {
        return x;
    }
    crop(x, 0..rec.rows, 0..rec.cols)
}

fn lrelu<'t, E: Element>(x: Tx<'t, E>) -> Tx<'t, E> {
    leaky_relu(x, LEAK)
}

fn conv_block<'t, E: Element>(
    p: &TapedParams<'t, E>,
    level: usize,
    x: Tx<'t, E>,
) -> Tx<'t, E> {
    let stride = if level == 0 { 1 } else { 2 };
    let cfg = Conv2dCfg { stride, ..Default::default() };
    let x = lrelu(p.conv(&format!("extractor.l{level}.c0"), x, cfg));
    lrelu(p.conv_same(&format!("extractor.l{level}.c1"), x))
}

/// One inter-frame attention block over both frames' maps (pre-norm,
/// queries per frame, keys/values from both frames).
fn attention_block<'t, E: Element>(
    p: &TapedParams<'t, E>,
    prefix: &str,
    heads: usize,
    x0: Tx<'t, E>,
    x1: Tx<'t, E>,
) -> (Tx<'t, E>, Tx<'t, E>) {
    let n0 = p.norm(&format!("{prefix}.norm1"), x0);
    let n1 = p.norm(&format!("{prefix}.norm1"), x1);
    let q0 = p.conv_same(&format!("{prefix}.q"), n0);
    let q1 = p.conv_same(&format!("{prefix}.q"), n1);
    let k0 = p.conv_same(&format!("{prefix}.k"), n0);
    let k1 = p.conv_same(&format!("{prefix}.k"), n1);
    let v0 = p.conv_same(&format!("{prefix}.v"), n0);
    let v1 = p.conv_same(&format!("{prefix}.v"), n1);
    let a0 = window_cross_attention(q0, k0, v0, k1, v1, heads, WIN);
    let a1 = window_cross_attention(q1, k1, v1, k0, v0, heads, WIN);
    let x0 = crate::ops::add(x0, p.conv_same(&format!("{prefix}.proj"), a0));
    let x1 = crate::ops::add(x1, p.conv_same(&format!("{prefix}.proj"), a1));
    let ffn = |x: Tx<'t, E>| {
        let n = p.norm(&format!("{prefix}.norm2"), x);
        let h = lrelu(p.conv_same(&format!("{prefix}.ffn1"), n));
        crate::ops::add(x, p.conv_same(&format!("{prefix}.ffn2"), h))
    };
    (ffn(x0), ffn(x1))
}

/// Attention level: strided patch embed, then the block stack on a
/// window-aligned (replication-padded) grid, cropped back afterwards.
fn attention_level<'t, E: Element>(
    p: &TapedParams<'t, E>,
    cfg: &ModelConfig,
    level: usize,
    x0: Tx<'t, E>,
    x1: Tx<'t, E>,
) -> (Tx<'t, E>, Tx<'t, E>) {
    let embed = format!("extractor.l{level}.embed");
    let ecfg = Conv2dCfg { stride: 2, ..Default::default() };
    let mut f0 = lrelu(p.conv(&embed, x0, ecfg));
    let mut f1 = lrelu(p.conv(&embed, x1, ecfg));
    let (p0, rec) = pad_to_multiple(f0, WIN);
    let (p1, _) = pad_to_multiple(f1, WIN);
    f0 = p0;
    f1 = p1;
    let d = cfg.level_channels[level];
    let heads = (d / 32).max(1);
    for b in 0..cfg.attention_blocks {
        let prefix = format!("attention.l{level}.b{b}");
        let (y0, y1) = attention_block(p, &prefix, heads, f0, f1);
        f0 = y0;
        f1 = y1;
    }
    (crop_back(f0, rec), crop_back(f1, rec))
}

/// Both frames' five-level pyramids. Spatial dims must be multiples of 32.
pub fn extract<'t, E: Element>(
    p: &TapedParams<'t, E>,
    cfg: &ModelConfig,
    i0: Tx<'t, E>,
    i1: Tx<'t, E>,
) -> (Vec<Tx<'t, E>>, Vec<Tx<'t, E>>) {
    let sh = i0.shape();
    assert_eq!(sh, i1.shape(), "frame shapes differ");
    assert!(
        sh[1] % 32 == 0 && sh[2] % 32 == 0,
        "extract requires dims that are multiples of 32 (got {}x{}); pad_to_multiple first",
        sh[1],
        sh[2]
    );
    let mut pyr0 = Vec::with_capacity(5);
    let mut pyr1 = Vec::with_capacity(5);
    let (mut x0, mut x1) = (i0, i1);
    for l in 0..3 {
        x0 = conv_block(p, l, x0);
        x1 = conv_block(p, l, x1);
        pyr0.push(x0);
        pyr1.push(x1);
    }
    for l in 3..5 {
        let (y0, y1) = attention_level(p, cfg, l, x0, x1);
        x0 = y0;
        x1 = y1;
        pyr0.push(x0);
        pyr1.push(x1);
    }
    (pyr0, pyr1)
}

/// Warped-feature concatenation shared by the flow and refinement decoders:
/// `[warp(f0), warp(f1), I0, I1, warp(I0), warp(I1), state]` at one level.
pub fn decoder_inputs<'t, E: Element>(
    f0: Tx<'t, E>,
    f1: Tx<'t, E>,
    i0: Tx<'t, E>,
    i1: Tx<'t, E>,
    state: crate::warping::WarpState<'t, E>,
) -> Vec<Tx<'t, E>> {
    let flow0 = state.flow_to_0();
    let flow1 = state.flow_to_1();
    vec![
        crate::warping::backward_warp(f0, flow0),
        crate::warping::backward_warp(f1, flow1),
        i0,
        i1,
        crate::warping::backward_warp(i0, flow0),
        crate::warping::backward_warp(i1, flow1),
        state.all,
    ]
}
