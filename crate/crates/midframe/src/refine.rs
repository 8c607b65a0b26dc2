//! Decoder-only residual synthesis.
//!
//! Blocks walk the configured levels coarsest→finest, each fusing warped
//! features, images, and the rescaled full-resolution warp state, then
//! applying two residual conv units. The level-0 block ends in a
//! zero-initialized head, so a fresh stage-2 model reproduces the stage-1
//! output exactly.

use crate::config::ModelConfig;
use crate::cost::{ArchVariant, RefinementKind};
use crate::extractor::{decoder_inputs, LEAK};
use crate::ops::{add, bilinear_up2, concat_ch, leaky_relu, Conv2dCfg};
use crate::params::TapedParams;
use crate::tape::{Element, Tx};
use crate::warping::{downscale_warp_state, WarpState};

fn lrelu<'t, E: Element>(x: Tx<'t, E>) -> Tx<'t, E> {
    leaky_relu(x, LEAK)
}

fn residual_unit<'t, E: Element>(
    p: &TapedParams<'t, E>,
    name: &str,
    x: Tx<'t, E>,
) -> Tx<'t, E> {
    add(x, p.conv_same(name, lrelu(x)))
}

/// Full-resolution residual R from both pyramids, per-level images, and the
/// final warp state `w0`.
pub fn refine<'t, E: Element>(
    p: &TapedParams<'t, E>,
    cfg: &ModelConfig,
    variant: &ArchVariant,
    pyr0: &[Tx<'t, E>],
    pyr1: &[Tx<'t, E>],
    imgs0: &[Tx<'t, E>],
    imgs1: &[Tx<'t, E>],
    w0: WarpState<'t, E>,
) -> Tx<'t, E> {
    match variant.refinement {
        RefinementKind::DecoderOnly => {
            refine_decoder_only(p, cfg, pyr0, pyr1, imgs0, imgs1, w0)
        }
        RefinementKind::UNet => refine_unet(p, pyr0, pyr1, imgs0, imgs1, w0),
    }
}

fn refine_decoder_only<'t, E: Element>(
    p: &TapedParams<'t, E>,
    cfg: &ModelConfig,
    pyr0: &[Tx<'t, E>],
    pyr1: &[Tx<'t, E>],
    imgs0: &[Tx<'t, E>],
    imgs1: &[Tx<'t, E>],
    w0: WarpState<'t, E>,
) -> Tx<'t, E> {
    let n = cfg.refinement_levels;
    let mut prev: Option<Tx<'t, E>> = None;
    let mut out = None;
    for i in 0..n {
        let l = n - 1 - i;
        let w_l = downscale_warp_state(w0, l);
        let mut parts = decoder_inputs(pyr0[l], pyr1[l], imgs0[l], imgs1[l], w_l);
        if let Some(o) = prev {
            parts.push(o);
        }
        let name = format!("refine.l{l}");
        let mut x = lrelu(p.conv_same(&format!("{name}.fuse"), concat_ch(&parts)));
        x = residual_unit(p, &format!("{name}.u0"), x);
        x = residual_unit(p, &format!("{name}.u1"), x);
        if l > 0 {
            prev = Some(bilinear_up2(x));
        } else {
            out = Some(p.conv_same(&format!("{name}.head"), x));
        }
    }
    out.expect("refinement must end at level 0")
}

fn refine_unet<'t, E: Element>(
    p: &TapedParams<'t, E>,
    pyr0: &[Tx<'t, E>],
    pyr1: &[Tx<'t, E>],
    imgs0: &[Tx<'t, E>],
    imgs1: &[Tx<'t, E>],
    w0: WarpState<'t, E>,
) -> Tx<'t, E> {
    let inputs = concat_ch(&decoder_inputs(pyr0[0], pyr1[0], imgs0[0], imgs1[0], w0));
    let mut skips = Vec::with_capacity(4);
    let mut x = inputs;
    for i in 0..4 {
        let stride = if i == 0 { 1 } else { 2 };
        let cfg2 = Conv2dCfg { stride, ..Default::default() };
        x = lrelu(p.conv(&format!("refine.enc{i}.c0"), x, cfg2));
        x = lrelu(p.conv_same(&format!("refine.enc{i}.c1"), x));
        skips.push(x);
    }
    for i in (0..3).rev() {
        let up = bilinear_up2(x);
        let cat = concat_ch(&[up, skips[i]]);
        x = lrelu(p.conv_same(&format!("refine.dec{i}.c0"), cat));
        x = lrelu(p.conv_same(&format!("refine.dec{i}.c1"), x));
    }
    p.conv_same("refine.head", x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::extract;
    use crate::gradcheck::test_array;
    use crate::params::{InitPolicy, ParamStore};
    use crate::tape::Tape;
    use crate::warping::downsample_to_level;

    fn setup<'t>(
        tape: &'t Tape<f32>,
        cfg: &ModelConfig,
        variant: &ArchVariant,
        policy: InitPolicy,
    ) -> (TapedParams<'t, f32>, Tx<'t, f32>) {
        let store = ParamStore::build(cfg, variant, policy, 2);
        let p = TapedParams::from_store(tape, &store);
        let i0 = tape.leaf(test_array(&[3, 64, 64], 51, 0.0, 1.0));
        let i1 = tape.leaf(test_array(&[3, 64, 64], 52, 0.0, 1.0));
        let (pyr0, pyr1) = extract(&p, cfg, i0, i1);
        let max_l = cfg.refinement_levels.max(3);
        let imgs0: Vec<_> = (0..max_l).map(|l| downsample_to_level(i0, l)).collect();
        let imgs1: Vec<_> = (0..max_l).map(|l| downsample_to_level(i1, l)).collect();
        let w0 = WarpState::new(tape.leaf(test_array(&[5, 64, 64], 53, -2.0, 2.0)));
        let r = refine(&p, cfg, variant, &pyr0, &pyr1, &imgs0, &imgs1, w0);
        (p, r)
    }

    #[test]
    fn residual_is_full_resolution_three_channel() {
        let cfg = ModelConfig::with_base_width(2, 1);
        let tape = Tape::new();
        let (_, r) = setup(&tape, &cfg, &ArchVariant::default(), InitPolicy::AllRandom);
        assert_eq!(r.shape(), [3, 64, 64]);
    }

    #[test]
    fn zero_head_gives_zero_residual() {
        let cfg = ModelConfig::with_base_width(2, 1);
        let tape = Tape::new();
        let (_, r) = setup(&tape, &cfg, &ArchVariant::default(), InitPolicy::Standard);
        assert!(r.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deeper_variants_consume_attention_features() {
        for levels in [2, 4, 5] {
            let mut cfg = ModelConfig::with_base_width(2, 1);
            cfg.refinement_levels = levels;
            cfg.refinement_channels = crate::cost::refinement_widths(2, levels);
            cfg.validate().unwrap();
            let tape = Tape::new();
            let (_, r) = setup(&tape, &cfg, &ArchVariant::default(), InitPolicy::AllRandom);
            assert_eq!(r.shape(), [3, 64, 64], "levels={levels}");
        }
    }

    #[test]
    fn unet_variant_runs_and_gets_gradients() {
        let cfg = ModelConfig::with_base_width(2, 1);
        let variant = ArchVariant { refinement: RefinementKind::UNet, ..Default::default() };
        let tape = Tape::new();
        let (p, r) = setup(&tape, &cfg, &variant, InitPolicy::AllRandom);
        let loss = crate::ops::mean_abs(r);
        let grads = tape.backward(loss);
        for (name, id) in p.ids() {
            if name.starts_with("refine.") {
                assert!(grads.get_id(id).is_some(), "no grad for {name}");
            }
        }
    }

    #[test]
    fn gradients_reach_every_refinement_parameter() {
        let cfg = ModelConfig::with_base_width(2, 1);
        let tape = Tape::new();
        let (p, r) = setup(&tape, &cfg, &ArchVariant::default(), InitPolicy::AllRandom);
        let loss = crate::ops::mean_abs(r);
        let grads = tape.backward(loss);
        for (name, id) in p.ids() {
            if name.starts_with("refine.") {
                let g = grads.get_id(id).unwrap_or_else(|| panic!("no grad for {name}"));
                assert!(g.iter().all(|v| v.is_finite()));
            }
        }
    }
}
