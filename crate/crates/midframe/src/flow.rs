//! Coarse-to-fine intermediate flow estimation.
//!
//! A small decoder predicts the initial warp state at level 3 from the two
//! coarsest feature levels; three high-resolution decoders then walk levels
//! 2→0, each predicting a residual update on the upsampled state. Every
//! prediction head is zero-initialized, so an untrained network emits the
//! upsampled coarse chain unchanged.

use crate::config::ModelConfig;
use crate::cost::{highres_widths, ArchVariant, DecoderKind};
use crate::extractor::{decoder_inputs, LEAK};
use crate::ops::{add, bilinear_up2, concat_ch, leaky_relu, Conv2dCfg};
use crate::params::TapedParams;
use crate::tape::{Element, Tx};
use crate::warping::{upsample_warp_state, WarpState};

/// Output of the full coarse-to-fine pass.
pub struct FlowEstimate<'t, E: Element> {
    /// Initial state at level 3, before any high-resolution refinement.
    pub initial: WarpState<'t, E>,
    /// Post-update states at levels 2, 1, 0 (finest last).
    pub intermediates: Vec<WarpState<'t, E>>,
    /// Full-resolution warp state W^0 (same handle as the last intermediate).
    pub state: WarpState<'t, E>,
}

fn lrelu<'t, E: Element>(x: Tx<'t, E>) -> Tx<'t, E> {
    leaky_relu(x, LEAK)
}

/// Initial warp state from the two coarsest levels of both pyramids,
/// predicted at level-3 resolution.
pub fn estimate_initial<'t, E: Element>(
    p: &TapedParams<'t, E>,
    pyr0: &[Tx<'t, E>],
    pyr1: &[Tx<'t, E>],
) -> WarpState<'t, E> {
    let inputs = concat_ch(&[
        bilinear_up2(pyr0[4]),
        bilinear_up2(pyr1[4]),
        pyr0[3],
        pyr1[3],
    ]);
    let x = lrelu(p.conv_same("flow_low.fuse", inputs));
    let x = lrelu(p.conv_same("flow_low.c0", x));
    WarpState::new(p.conv_same("flow_low.head", x))
}

/// One high-resolution update: predict a residual on `w_next` at level `l`
/// from warped features and images.
pub fn refine_level<'t, E: Element>(
    p: &TapedParams<'t, E>,
    cfg: &ModelConfig,
    variant: &ArchVariant,
    l: usize,
    f0: Tx<'t, E>,
    f1: Tx<'t, E>,
    i0: Tx<'t, E>,
    i1: Tx<'t, E>,
    w_next: WarpState<'t, E>,
) -> WarpState<'t, E> {
    let width = highres_widths(cfg.base_width)[2 - l];
    let prefix = format!("flow_high.l{l}");
    let inputs = concat_ch(&decoder_inputs(f0, f1, i0, i1, w_next));
    let mut x = lrelu(p.conv_same(&format!("{prefix}.fuse"), inputs));
    for u in 0..2 {
        // kernel sizes live in the stored weight shapes
        x = match variant.decoder {
            DecoderKind::DwSeparable => {
                let dw = Conv2dCfg { groups: width, ..Default::default() };
                let y = lrelu(p.conv(&format!("{prefix}.u{u}.dw"), x, dw));
                lrelu(p.conv_same(&format!("{prefix}.u{u}.pw"), y))
            }
            DecoderKind::NormalConv => lrelu(p.conv_same(&format!("{prefix}.u{u}.c"), x)),
        };
    }
    let delta = p.conv_same(&format!("{prefix}.head"), x);
    WarpState::new(add(delta, w_next.all))
}

/// Full coarse-to-fine chain over prepared pyramids and per-level images.
///
/// `imgs0[l]` / `imgs1[l]` are the input frames downsampled to levels 0–2.
pub fn estimate_flow<'t, E: Element>(
    p: &TapedParams<'t, E>,
    cfg: &ModelConfig,
    variant: &ArchVariant,
    pyr0: &[Tx<'t, E>],
    pyr1: &[Tx<'t, E>],
    imgs0: &[Tx<'t, E>],
    imgs1: &[Tx<'t, E>],
) -> FlowEstimate<'t, E> {
    let initial = estimate_initial(p, pyr0, pyr1);
    let mut w = upsample_warp_state(initial);
    let mut intermediates = Vec::with_capacity(3);
    for l in (0..3).rev() {
        let s = refine_level(p, cfg, variant, l, pyr0[l], pyr1[l], imgs0[l], imgs1[l], w);
        intermediates.push(s);
        if l > 0 {
            w = upsample_warp_state(s);
        } else {
            w = s;
        }
    }
    FlowEstimate { initial, intermediates, state: w }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::extract;
    use crate::gradcheck::test_array;
    use crate::params::{InitPolicy, ParamStore, TapedParams};
    use crate::tape::Tape;
    use crate::warping::downsample_to_level;

    fn run_estimate<'t>(
        tape: &'t Tape<f32>,
        store: &ParamStore,
        cfg: &ModelConfig,
        seed: u64,
    ) -> (FlowEstimate<'t, f32>, TapedParams<'t, f32>) {
        let p = TapedParams::from_store(tape, store);
        let i0 = tape.leaf(test_array(&[3, 64, 64], seed, 0.0, 1.0));
        let i1 = tape.leaf(test_array(&[3, 64, 64], seed + 1, 0.0, 1.0));
        let (pyr0, pyr1) = extract(&p, cfg, i0, i1);
        let imgs0: Vec<_> = (0..3).map(|l| downsample_to_level(i0, l)).collect();
        let imgs1: Vec<_> = (0..3).map(|l| downsample_to_level(i1, l)).collect();
        let est = estimate_flow(&p, cfg, &ArchVariant::default(), &pyr0, &pyr1, &imgs0, &imgs1);
        (est, p)
    }

    #[test]
    fn state_resolutions_walk_the_pyramid() {
        let cfg = ModelConfig::with_base_width(2, 1);
        let store = ParamStore::build(&cfg, &ArchVariant::default(), InitPolicy::Standard, 0);
        let tape = Tape::new();
        let (est, _) = run_estimate(&tape, &store, &cfg, 11);
        assert_eq!(est.initial.spatial(), (8, 8));
        let sizes: Vec<_> = est.intermediates.iter().map(|s| s.spatial()).collect();
        assert_eq!(sizes, [(16, 16), (32, 32), (64, 64)]);
        assert_eq!(est.state.spatial(), (64, 64));
    }

    #[test]
    fn zero_heads_propagate_the_initial_chain_exactly() {
        let cfg = ModelConfig::with_base_width(2, 1);
        let mut store = ParamStore::build(&cfg, &ArchVariant::default(), InitPolicy::Standard, 0);
        // give the coarse head real output while the update heads stay zero
        let seeded = ParamStore::build(&cfg, &ArchVariant::default(), InitPolicy::AllRandom, 42);
        store.get_mut("flow_low.head.w").assign(seeded.get("flow_low.head.w"));
        store.get_mut("flow_low.head.b").assign(seeded.get("flow_low.head.b"));
        let tape = Tape::new();
        let (est, _) = run_estimate(&tape, &store, &cfg, 21);
        let mut expect = est.initial;
        for _ in 0..3 {
            expect = upsample_warp_state(expect);
        }
        assert_eq!(*est.state.all.value(), *expect.all.value());
        let any_nonzero = est.initial.all.value().iter().any(|&v| v != 0.0);
        assert!(any_nonzero, "coarse head should produce signal");
    }

    #[test]
    fn fully_zero_heads_give_zero_state() {
        let cfg = ModelConfig::with_base_width(2, 1);
        let store = ParamStore::build(&cfg, &ArchVariant::default(), InitPolicy::Standard, 5);
        let tape = Tape::new();
        let (est, _) = run_estimate(&tape, &store, &cfg, 31);
        assert!(est.state.all.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_reach_every_flow_parameter() {
        let cfg = ModelConfig::with_base_width(2, 1);
        let store = ParamStore::build(&cfg, &ArchVariant::default(), InitPolicy::AllRandom, 8);
        let tape = Tape::new();
        let (est, p) = run_estimate(&tape, &store, &cfg, 41);
        let loss = crate::ops::mean_abs(est.state.all);
        let grads = tape.backward(loss);
        for (name, id) in p.ids() {
            if name.starts_with("refine.") {
                continue;
            }
            let g = grads.get_id(id).unwrap_or_else(|| panic!("no grad for {name}"));
            assert!(g.iter().all(|v| v.is_finite()), "non-finite grad in {name}");
        }
    }
}
