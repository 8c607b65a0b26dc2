//! Analytic parameter and FLOP accounting.
//!
//! [`enumerate_layers`] is the single description of the architecture: the
//! model builder allocates exactly these tensors and the cost functions fold
//! over the same list, so the analytic count and the instantiated parameter
//! count cannot drift apart.
//!
//! Conventions: one multiply-accumulate is 2 FLOPs; convolutions count
//! `2·k²·Cin·Cout·H·W/groups` at their output resolution; attention matmuls
//! count on unpadded token grids; bias adds, activations, normalization,
//! warping, and resampling are not counted.

use crate::config::ModelConfig;

/// High-resolution decoder body style (the kernel-shape ablation axis).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DecoderKind {
    /// Depth-wise k×k + point-wise 1×1 units.
    #[default]
    DwSeparable,
    /// Plain full convolutions at the configured kernel sizes.
    NormalConv,
}

/// Refinement stage structure (the refinement ablation axis).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RefinementKind {
    /// Decoder-only chain of per-level blocks.
    #[default]
    DecoderOnly,
    /// Encoder–decoder baseline with widths [4C, 8C, 16C, 32C].
    UNet,
}

/// Structural switches that are not part of the published configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ArchVariant {
    pub decoder: DecoderKind,
    pub refinement: RefinementKind,
}

/// One parameterized (or FLOP-bearing) unit of the network.
#[derive(Clone, Debug)]
pub enum LayerSpec {
    Conv {
        name: String,
        cin: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        groups: usize,
        /// Pyramid level of the output map (spatial divisor 2^level).
        out_level: usize,
        /// Forward executions per model invocation (2 for weight-shared
        /// per-frame layers).
        runs: usize,
        zero_init: bool,
    },
    /// Channel layer norm (affine); parameters only, FLOPs uncounted.
    Norm { name: String, ch: usize },
    /// Windowed cross-attention score/value matmuls for both frames at one
    /// level; FLOPs only.
    AttnCore { name: String, d: usize, out_level: usize },
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv { name, .. } => name,
            LayerSpec::Norm { name, .. } => name,
            LayerSpec::AttnCore { name, .. } => name,
        }
    }

    pub fn params(&self) -> u64 {
        match self {
            LayerSpec::Conv { cin, cout, kh, kw, groups, .. } => {
                (cout * (cin / groups) * kh * kw + cout) as u64
            }
            LayerSpec::Norm { ch, .. } => 2 * *ch as u64,
            LayerSpec::AttnCore { .. } => 0,
        }
    }

    /// FLOPs for a full-resolution input of `h`×`w` (multiple of 32).
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        match self {
            LayerSpec::Conv { cin, cout, kh, kw, groups, out_level, runs, .. } => {
                let hw = (h * w) as u64 / 4u64.pow(*out_level as u32);
                2 * (kh * kw * cin * cout / groups) as u64 * hw * *runs as u64
            }
            LayerSpec::Norm { .. } => 0,
            // per frame and window of 64 tokens: QK^T and AV are each
            // 64·128·d MACs; summed over n/64 windows and both frames this
            // is 2·(2·2·128·d·n) = 1024·n·d
            LayerSpec::AttnCore { d, out_level, .. } => {
                let n = (h * w) as u64 / 4u64.pow(*out_level as u32);
                1024 * n * *d as u64
            }
        }
    }
}

/// Default refinement width schedule: `min(2^(l+1), 16)·C` for each level,
/// coarsest first.
pub fn refinement_widths(c: usize, levels: usize) -> Vec<usize> {
    (0..levels).rev().map(|l| c * (1usize << (l + 1)).min(16)).collect()
}

/// Internal widths of the three high-resolution flow decoders, for levels
/// 2, 1, 0 in that order.
pub fn highres_widths(c: usize) -> [usize; 3] {
    [5 * c, 5 * c, 18 * c]
}

/// Channels of a decoder input at level `l`: warped features from both frames
/// plus both images, both warped images, and the incoming warp state.
fn decoder_in(ch_l: usize) -> usize {
    2 * ch_l + 3 + 3 + 3 + 3 + 5
}

fn conv(
    name: String,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    out_level: usize,
    runs: usize,
) -> LayerSpec {
    LayerSpec::Conv { name, cin, cout, kh: k, kw: k, stride, groups: 1, out_level, runs, zero_init: false }
}

/// The complete architecture as a flat, stably-named layer list.
pub fn enumerate_layers(cfg: &ModelConfig, variant: &ArchVariant) -> Vec<LayerSpec> {
    let ch = &cfg.level_channels;
    let c = cfg.base_width;
    let ffn_ratio = 2;
    let mut ls = Vec::new();

    // extractor: plain double-conv levels 0–2, patch embeds for 3–4
    for l in 0..3 {
        let cin = if l == 0 { 3 } else { ch[l - 1] };
        let stride = if l == 0 { 1 } else { 2 };
        ls.push(conv(format!("extractor.l{l}.c0"), cin, ch[l], 3, stride, l, 2));
        ls.push(conv(format!("extractor.l{l}.c1"), ch[l], ch[l], 3, 1, l, 2));
    }
    for l in 3..5 {
        ls.push(conv(format!("extractor.l{l}.embed"), ch[l - 1], ch[l], 3, 2, l, 2));
        let d = ch[l];
        for b in 0..cfg.attention_blocks {
            let p = format!("attention.l{l}.b{b}");
            ls.push(LayerSpec::Norm { name: format!("{p}.norm1"), ch: d });
            for proj in ["q", "k", "v", "proj"] {
                ls.push(conv(format!("{p}.{proj}"), d, d, 1, 1, l, 2));
            }
            ls.push(LayerSpec::AttnCore { name: format!("{p}.core"), d, out_level: l });
            ls.push(LayerSpec::Norm { name: format!("{p}.norm2"), ch: d });
            ls.push(conv(format!("{p}.ffn1"), d, ffn_ratio * d, 1, 1, l, 2));
            ls.push(conv(format!("{p}.ffn2"), ffn_ratio * d, d, 1, 1, l, 2));
        }
    }

    // low-res flow decoder at level 3 over [up(f^4), f^3] from both frames
    let glow_in = 2 * ch[4] + 2 * ch[3];
    ls.push(conv("flow_low.fuse".into(), glow_in, 2 * c, 3, 1, 3, 1));
    ls.push(conv("flow_low.c0".into(), 2 * c, 2 * c, 3, 1, 3, 1));
    ls.push(LayerSpec::Conv {
        name: "flow_low.head".into(),
        cin: 2 * c,
        cout: 5,
        kh: 3,
        kw: 3,
        stride: 1,
        groups: 1,
        out_level: 3,
        runs: 1,
        zero_init: true,
    });

    // high-res flow decoders at levels 2, 1, 0
    let widths = highres_widths(c);
    for (i, l) in (0..3).rev().enumerate() {
        let w = widths[i];
        let k = cfg.highres_kernels[i];
        let p = format!("flow_high.l{l}");
        ls.push(conv(format!("{p}.fuse"), decoder_in(ch[l]), w, 3, 1, l, 1));
        for u in 0..2 {
            match variant.decoder {
                DecoderKind::DwSeparable => {
                    ls.push(LayerSpec::Conv {
                        name: format!("{p}.u{u}.dw"),
                        cin: w,
                        cout: w,
                        kh: k,
                        kw: k,
                        stride: 1,
                        groups: w,
                        out_level: l,
                        runs: 1,
                        zero_init: false,
                    });
                    ls.push(conv(format!("{p}.u{u}.pw"), w, w, 1, 1, l, 1));
                }
                DecoderKind::NormalConv => {
                    ls.push(conv(format!("{p}.u{u}.c"), w, w, k, 1, l, 1));
                }
            }
        }
        ls.push(LayerSpec::Conv {
            name: format!("{p}.head"),
            cin: w,
            cout: 5,
            kh: 3,
            kw: 3,
            stride: 1,
            groups: 1,
            out_level: l,
            runs: 1,
            zero_init: true,
        });
    }

    match variant.refinement {
        RefinementKind::DecoderOnly => {
            let n = cfg.refinement_levels;
            let mut prev = 0;
            for (i, &w) in cfg.refinement_channels.iter().enumerate() {
                let l = n - 1 - i;
                let p = format!("refine.l{l}");
                ls.push(conv(format!("{p}.fuse"), decoder_in(ch[l]) + prev, w, 3, 1, l, 1));
                ls.push(conv(format!("{p}.u0"), w, w, 3, 1, l, 1));
                ls.push(conv(format!("{p}.u1"), w, w, 3, 1, l, 1));
                if l == 0 {
                    ls.push(LayerSpec::Conv {
                        name: format!("{p}.head"),
                        cin: w,
                        cout: 3,
                        kh: 3,
                        kw: 3,
                        stride: 1,
                        groups: 1,
                        out_level: 0,
                        runs: 1,
                        zero_init: true,
                    });
                }
                prev = w;
            }
        }
        RefinementKind::UNet => {
            let widths = [4 * c, 8 * c, 16 * c, 32 * c];
            for (i, &w) in widths.iter().enumerate() {
                let cin = if i == 0 { decoder_in(ch[0]) } else { widths[i - 1] };
                let stride = if i == 0 { 1 } else { 2 };
                ls.push(conv(format!("refine.enc{i}.c0"), cin, w, 3, stride, i, 1));
                ls.push(conv(format!("refine.enc{i}.c1"), w, w, 3, 1, i, 1));
            }
            for i in (0..3).rev() {
                let cin = widths[i + 1] + widths[i];
                ls.push(conv(format!("refine.dec{i}.c0"), cin, widths[i], 3, 1, i, 1));
                ls.push(conv(format!("refine.dec{i}.c1"), widths[i], widths[i], 3, 1, i, 1));
            }
            ls.push(LayerSpec::Conv {
                name: "refine.head".into(),
                cin: widths[0],
                cout: 3,
                kh: 3,
                kw: 3,
                stride: 1,
                groups: 1,
                out_level: 0,
                runs: 1,
                zero_init: true,
            });
        }
    }
    ls
}

pub fn count_params(layers: &[LayerSpec]) -> u64 {
    layers.iter().map(LayerSpec::params).sum()
}

pub fn count_flops(layers: &[LayerSpec], h: usize, w: usize) -> u64 {
    assert!(
        h % 32 == 0 && w % 32 == 0,
        "cost model expects padded dimensions (multiples of 32), got {h}x{w}"
    );
    layers.iter().map(|l| l.flops(h, w)).sum()
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct SectionCost {
    pub section: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct CostReport {
    pub params: u64,
    pub flops: u64,
    pub height: usize,
    pub width: usize,
    pub sections: Vec<SectionCost>,
}

pub fn cost_report(cfg: &ModelConfig, variant: &ArchVariant, h: usize, w: usize) -> CostReport {
    let layers = enumerate_layers(cfg, variant);
    let mut sections: Vec<SectionCost> = Vec::new();
    for layer in &layers {
        let sec = layer.name().split('.').next().unwrap().to_string();
        if sections.last().map(|s| s.section != sec).unwrap_or(true) {
            sections.push(SectionCost { section: sec, params: 0, flops: 0 });
        }
        let s = sections.last_mut().unwrap();
        s.params += layer.params();
        s.flops += layer.flops(h, w);
    }
    // attention layers interleave with extractor embeds; merge repeats
    let mut merged: Vec<SectionCost> = Vec::new();
    for s in sections {
        match merged.iter_mut().find(|m| m.section == s.section) {
            Some(m) => {
                m.params += s.params;
                m.flops += s.flops;
            }
            None => merged.push(s),
        }
    }
    CostReport {
        params: count_params(&layers),
        flops: count_flops(&layers, h, w),
        height: h,
        width: w,
        sections: merged,
    }
}
