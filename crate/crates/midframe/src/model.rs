//! Full-model forward pass and inference API.
//!
//! The output frame is a mask-weighted blend of the two backward-warped
//! inputs plus a learned residual. Flows are estimated either at native
//! resolution or on 0.5×-downsampled inputs and lifted back up — the latter
//! path keeps the effective receptive field large on high-definition frames.

use ndarray::ArrayD;
use thiserror::Error;

use crate::config::ModelConfig;
use crate::cost::ArchVariant;
use crate::extractor::{crop_back, extract, pad_to_multiple};
use crate::flow::estimate_flow;
use crate::ops::{add, add_scalar, clamp01, concat_ch, crop, mul, replicate_pad, scale, sigmoid};
use crate::params::{InitPolicy, ParamStore, TapedParams};
use crate::refine::refine;
use crate::tape::{Element, Tape, Tx};
use crate::warping::{
    backward_warp, downsample_image, downsample_to_level, upsample_warp_state, WarpState,
};

/// Where the warp state comes from at inference time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FlowMode {
    /// Estimate flows at native resolution.
    #[default]
    #[serde(rename = "original_flow")]
    Original,
    /// Estimate flows at 0.5× resolution and lift the state ×2.
    #[serde(rename = "downscaled_flow")]
    Downscaled,
}

impl FlowMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FlowMode::Original => "original_flow",
            FlowMode::Downscaled => "downscaled_flow",
        }
    }
}

impl std::str::FromStr for FlowMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "original_flow" | "original" => Ok(FlowMode::Original),
            "downscaled_flow" | "downscaled" => Ok(FlowMode::Downscaled),
            other => Err(format!("unknown flow mode `{other}`")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("frame shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("expected 3-channel images shaped (3,H,W), got {0:?}")]
    NotAnImage(Vec<usize>),
    #[error("downscaled-flow mode requires even dims, got {0}x{1}")]
    OddDims(usize, usize),
    #[error("dims {0}x{1} fall below 32 after downscale; use original_flow")]
    TooSmall(usize, usize),
}

/// Everything the forward pass produces, still on the tape.
pub struct ModelOutput<'t, E: Element> {
    /// Unclamped prediction, cropped to the input size (the training target).
    pub pred: Tx<'t, E>,
    /// Final warp state at the padded working resolution.
    pub state: WarpState<'t, E>,
    /// Residual R at the padded working resolution, when enabled.
    pub residual: Option<Tx<'t, E>>,
    /// Warp states preceding the final one (coarsest first), at the
    /// resolution flow estimation ran. Auxiliary supervision hooks in here.
    pub coarse_states: Vec<WarpState<'t, E>>,
    /// The inputs after padding, matching `state`'s resolution.
    pub padded_inputs: (Tx<'t, E>, Tx<'t, E>),
}

impl<'t, E: Element> ModelOutput<'t, E> {
    /// Displayable frame: prediction clamped to [0,1].
    pub fn frame(&self) -> Tx<'t, E> {
        clamp01(self.pred)
    }
}

/// Mask-blend composition (Eq. 2 without the residual), unclamped.
pub fn blend<'t, E: Element>(
    i0: Tx<'t, E>,
    i1: Tx<'t, E>,
    state: WarpState<'t, E>,
) -> Tx<'t, E> {
    let m = sigmoid(state.mask_logits());
    let m3 = concat_ch(&[m, m, m]);
    let inv = add_scalar(scale(m3, -1.0), 1.0);
    let w0 = backward_warp(i0, state.flow_to_0());
    let w1 = backward_warp(i1, state.flow_to_1());
    add(mul(m3, w0), mul(inv, w1))
}

/// Composition with optional residual, clamped to [0,1].
pub fn compose<'t, E: Element>(
    i0: Tx<'t, E>,
    i1: Tx<'t, E>,
    state: WarpState<'t, E>,
    residual: Option<Tx<'t, E>>,
) -> Tx<'t, E> {
    let mut out = blend(i0, i1, state);
    if let Some(r) = residual {
        out = add(out, r);
    }
    clamp01(out)
}

/// Complete differentiable forward pass. Inputs may be any size; they are
/// replication-padded to multiples of 32 internally and the prediction is
/// cropped back. With `use_residual` false the refinement stage is skipped
/// entirely (stage-1 behaviour).
pub fn forward<'t, E: Element>(
    p: &TapedParams<'t, E>,
    cfg: &ModelConfig,
    variant: &ArchVariant,
    i0: Tx<'t, E>,
    i1: Tx<'t, E>,
    use_residual: bool,
    mode: FlowMode,
) -> Result<ModelOutput<'t, E>, ModelError> {
    let (s0, s1) = (i0.shape(), i1.shape());
    if s0 != s1 {
        return Err(ModelError::ShapeMismatch(s0.to_vec(), s1.to_vec()));
    }
    if s0.len() != 3 || s0[0] != 3 {
        return Err(ModelError::NotAnImage(s0.to_vec()));
    }
    let (h, w) = (s0[1], s0[2]);
    let (i0p, _rec) = pad_to_multiple(i0, 32);
    let (i1p, _) = pad_to_multiple(i1, 32);
    let psh = i0p.shape();
    let (hp, wp) = (psh[1], psh[2]);

    let (state, coarse_states, full_pyr) = match mode {
        FlowMode::Original => {
            let (pyr0, pyr1) = extract(p, cfg, i0p, i1p);
            let imgs0: Vec<_> = (0..3).map(|l| downsample_to_level(i0p, l)).collect();
            let imgs1: Vec<_> = (0..3).map(|l| downsample_to_level(i1p, l)).collect();
            let est = estimate_flow(p, cfg, variant, &pyr0, &pyr1, &imgs0, &imgs1);
            let mut coarse = vec![est.initial];
            coarse.extend_from_slice(&est.intermediates[..est.intermediates.len() - 1]);
            (est.state, coarse, Some((pyr0, pyr1)))
        }
        FlowMode::Downscaled => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(ModelError::OddDims(h, w));
            }
            if h / 2 < 32 || w / 2 < 32 {
                return Err(ModelError::TooSmall(h, w));
            }
            let h0 = downsample_image(i0, 0.5);
            let h1 = downsample_image(i1, 0.5);
            let (h0p, hrec) = pad_to_multiple(h0, 32);
            let (h1p, _) = pad_to_multiple(h1, 32);
            let (pyr0, pyr1) = extract(p, cfg, h0p, h1p);
            let imgs0: Vec<_> = (0..3).map(|l| downsample_to_level(h0p, l)).collect();
            let imgs1: Vec<_> = (0..3).map(|l| downsample_to_level(h1p, l)).collect();
            let est = estimate_flow(p, cfg, variant, &pyr0, &pyr1, &imgs0, &imgs1);
            let mut coarse = vec![est.initial];
            coarse.extend_from_slice(&est.intermediates[..est.intermediates.len() - 1]);
            let half = WarpState::new(crop_back(est.state.all, hrec));
            let native = upsample_warp_state(half);
            (WarpState::new(replicate_pad(native.all, (0, hp - h, 0, wp - w))), coarse, None)
        }
    };

    let residual = if use_residual {
        let (pyr0, pyr1) = match full_pyr {
            Some(pair) => pair,
            None => extract(p, cfg, i0p, i1p),
        };
        let n = cfg.refinement_levels.max(3);
        let imgs0: Vec<_> = (0..n).map(|l| downsample_to_level(i0p, l)).collect();
        let imgs1: Vec<_> = (0..n).map(|l| downsample_to_level(i1p, l)).collect();
        Some(refine(p, cfg, variant, &pyr0, &pyr1, &imgs0, &imgs1, state))
    } else {
        None
    };

    let mut pred = blend(i0p, i1p, state);
    if let Some(r) = residual {
        pred = add(pred, r);
    }
    let pred = crop(pred, 0..h, 0..w);
    Ok(ModelOutput { pred, state, residual, coarse_states, padded_inputs: (i0p, i1p) })
}

/// A configured model with its master weights: the inference entry point.
pub struct Model {
    pub cfg: ModelConfig,
    pub variant: ArchVariant,
    pub store: ParamStore,
}

/// Inference output with everything detached from the tape.
#[derive(Debug)]
pub struct InterpolationResult {
    /// Synthesized middle frame, clamped to [0,1], shaped (3,H,W).
    pub frame: ArrayD<f32>,
    /// Flow toward the first frame, (2,H,W), in output-pixel units.
    pub flow_to_0: ArrayD<f32>,
    /// Flow toward the second frame, (2,H,W).
    pub flow_to_1: ArrayD<f32>,
    /// Activated composition mask, (1,H,W), values in (0,1).
    pub mask: ArrayD<f32>,
    /// Residual correction, (3,H,W).
    pub residual: ArrayD<f32>,
    pub mode: FlowMode,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let variant = ArchVariant::default();
        let store = ParamStore::build(&cfg, &variant, InitPolicy::Standard, seed);
        Model { cfg, variant, store }
    }

    pub fn from_store(cfg: ModelConfig, store: ParamStore) -> Self {
        Model { cfg, variant: ArchVariant::default(), store }
    }

    /// Synthesize the frame halfway between `i0` and `i1`.
    pub fn interpolate(
        &self,
        i0: &ArrayD<f32>,
        i1: &ArrayD<f32>,
        mode: FlowMode,
    ) -> Result<InterpolationResult, ModelError> {
        let tape: Tape<f32> = Tape::new();
        let p = TapedParams::from_store(&tape, &self.store);
        let t0 = tape.leaf(i0.clone());
        let t1 = tape.leaf(i1.clone());
        let out = forward(&p, &self.cfg, &self.variant, t0, t1, true, mode)?;
        let (h, w) = (i0.shape()[1], i0.shape()[2]);
        let frame = out.frame();
        let flow0 = crop(out.state.flow_to_0(), 0..h, 0..w);
        let flow1 = crop(out.state.flow_to_1(), 0..h, 0..w);
        let mask = crop(sigmoid(out.state.mask_logits()), 0..h, 0..w);
        let residual = out
            .residual
            .map(|r| crop(r, 0..h, 0..w).value().as_ref().clone())
            .unwrap_or_else(|| ArrayD::zeros(i0.raw_dim()));
        Ok(InterpolationResult {
            frame: frame.value().as_ref().clone(),
            flow_to_0: flow0.value().as_ref().clone(),
            flow_to_1: flow1.value().as_ref().clone(),
            mask: mask.value().as_ref().clone(),
            residual,
            mode,
        })
    }
}
