//! Parameter storage and initialization.
//!
//! A [`ParamStore`] is built by walking [`crate::cost::enumerate_layers`], so
//! every tensor the cost model counts exists here and nothing else does.
//! Master weights are `f32`; [`TapedParams`] lifts them onto a tape at any
//! element precision for a differentiable forward pass.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::cost::{count_params, enumerate_layers, ArchVariant, LayerSpec};
use crate::ops::{conv2d, layer_norm_ch, Conv2dCfg};
use crate::tape::{Element, Tape, Tx};

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitPolicy {
    /// Kaiming-uniform conv weights (leaky-ReLU gain), zero biases, and
    /// zeroed prediction heads so the first forward pass is an identity
    /// warp chain.
    Standard,
    /// Every tensor random, including heads and biases. Only for tests that
    /// need gradient flow through layers the standard init silences.
    AllRandom,
}

#[derive(Clone)]
pub struct ParamStore {
    entries: Vec<(String, ArrayD<f32>)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn build(cfg: &ModelConfig, variant: &ArchVariant, policy: InitPolicy, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore { entries: Vec::new(), index: HashMap::new() };
        let leak: f32 = 0.1;
        let gain = (2.0 / (1.0 + leak * leak)).sqrt();
        for layer in enumerate_layers(cfg, variant) {
            match layer {
                LayerSpec::Conv { name, cin, cout, kh, kw, groups, zero_init, .. } => {
                    let fan_in = (cin / groups) * kh * kw;
                    let bound = gain * (3.0 / fan_in as f32).sqrt();
                    let wshape = IxDyn(&[cout, cin / groups, kh, kw]);
                    let (w, b) = if zero_init && policy == InitPolicy::Standard {
                        (ArrayD::zeros(wshape), ArrayD::zeros(IxDyn(&[cout])))
                    } else {
                        let dist = Uniform::new_inclusive(-bound, bound);
                        let w = ArrayD::from_shape_simple_fn(wshape, || dist.sample(&mut rng));
                        let b = match policy {
                            InitPolicy::Standard => ArrayD::zeros(IxDyn(&[cout])),
                            InitPolicy::AllRandom => {
                                let bd = Uniform::new_inclusive(-0.05f32, 0.05);
                                ArrayD::from_shape_simple_fn(IxDyn(&[cout]), || bd.sample(&mut rng))
                            }
                        };
                        (w, b)
                    };
                    store.push(format!("{name}.w"), w);
                    store.push(format!("{name}.b"), b);
                }
                LayerSpec::Norm { name, ch } => {
                    store.push(format!("{name}.g"), ArrayD::ones(IxDyn(&[ch])));
                    store.push(format!("{name}.be"), ArrayD::zeros(IxDyn(&[ch])));
                }
                LayerSpec::AttnCore { .. } => {}
            }
        }
        debug_assert_eq!(store.param_count(), count_params(&enumerate_layers(cfg, variant)));
        store
    }

    /// Reassembles a store from named tensors (checkpoint loading). Order is
    /// preserved; duplicate names panic.
    pub fn from_entries(entries: Vec<(String, ArrayD<f32>)>) -> Self {
        let mut store = ParamStore { entries: Vec::new(), index: HashMap::new() };
        for (name, value) in entries {
            store.push(name, value);
        }
        store
    }

    fn push(&mut self, name: String, value: ArrayD<f32>) {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
    }

    /// Total scalar count across all tensors.
    pub fn param_count(&self) -> u64 {
        self.entries.iter().map(|(_, a)| a.len() as u64).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> &ArrayD<f32> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f32> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f32>)> {
        self.entries.iter_mut().map(|(n, a)| (n.as_str(), a))
    }
}

/// Parameters lifted onto a tape as leaves, addressable by name.
pub struct TapedParams<'t, E: Element> {
    tape: &'t Tape<E>,
    map: HashMap<String, Tx<'t, E>>,
}

impl<'t, E: Element> TapedParams<'t, E> {
    pub fn from_store(tape: &'t Tape<E>, store: &ParamStore) -> Self {
        let mut map = HashMap::new();
        for (name, value) in store.iter() {
            let cast = value.mapv(|v| E::cast(v as f64));
            map.insert(name.to_string(), tape.leaf(cast));
        }
        TapedParams { tape, map }
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub fn get(&self, name: &str) -> Tx<'t, E> {
        *self.map.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Tape node ids of every leafed tensor, for gradient collection.
    pub fn ids(&self) -> impl Iterator<Item = (&str, usize)> {
        self.map.iter().map(|(n, t)| (n.as_str(), t.id))
    }

    /// Convolution with this store's `{name}.w` / `{name}.b`.
    pub fn conv(&self, name: &str, x: Tx<'t, E>, cfg: Conv2dCfg) -> Tx<'t, E> {
        let w = self.get(&format!("{name}.w"));
        let b = self.get(&format!("{name}.b"));
        conv2d(x, w, Some(b), cfg)
    }

    /// Stride-1 ungrouped convolution, same padding.
    pub fn conv_same(&self, name: &str, x: Tx<'t, E>) -> Tx<'t, E> {
        self.conv(name, x, Conv2dCfg::default())
    }

    /// Channel layer norm with this store's `{name}.g` / `{name}.be`.
    pub fn norm(&self, name: &str, x: Tx<'t, E>) -> Tx<'t, E> {
        layer_norm_ch(x, self.get(&format!("{name}.g")), self.get(&format!("{name}.be")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_matches_analytic_count_for_presets() {
        for cfg in [ModelConfig::small(), ModelConfig::large()] {
            let store = ParamStore::build(&cfg, &ArchVariant::default(), InitPolicy::Standard, 0);
            let layers = enumerate_layers(&cfg, &ArchVariant::default());
            assert_eq!(store.param_count(), count_params(&layers));
        }
    }

    #[test]
    fn standard_init_zeroes_heads_and_biases() {
        let cfg = ModelConfig::small();
        let store = ParamStore::build(&cfg, &ArchVariant::default(), InitPolicy::Standard, 7);
        for head in ["flow_low.head", "flow_high.l0.head", "refine.l0.head"] {
            assert!(store.get(&format!("{head}.w")).iter().all(|&v| v == 0.0));
            assert!(store.get(&format!("{head}.b")).iter().all(|&v| v == 0.0));
        }
        assert!(store.get("extractor.l0.c0.b").iter().all(|&v| v == 0.0));
        assert!(store.get("extractor.l0.c0.w").iter().any(|&v| v != 0.0));
        assert!(store.get("attention.l3.b0.norm1.g").iter().all(|&v| v == 1.0));
    }

    #[test]
    fn all_random_init_leaves_nothing_zeroed() {
        let cfg = ModelConfig::small();
        let store = ParamStore::build(&cfg, &ArchVariant::default(), InitPolicy::AllRandom, 7);
        assert!(store.get("flow_low.head.w").iter().any(|&v| v != 0.0));
        assert!(store.get("refine.l0.fuse.b").iter().any(|&v| v != 0.0));
    }

    #[test]
    fn build_is_deterministic_in_the_seed() {
        let cfg = ModelConfig::small();
        let a = ParamStore::build(&cfg, &ArchVariant::default(), InitPolicy::Standard, 3);
        let b = ParamStore::build(&cfg, &ArchVariant::default(), InitPolicy::Standard, 3);
        let c = ParamStore::build(&cfg, &ArchVariant::default(), InitPolicy::Standard, 4);
        for ((n1, v1), (n2, v2)) in a.iter().zip(b.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2);
        }
        let differs = a.iter().zip(c.iter()).any(|((_, v1), (_, v2))| v1 != v2);
        assert!(differs);
    }

    #[test]
    fn taped_params_cast_and_resolve() {
        let cfg = ModelConfig::small();
        let store = ParamStore::build(&cfg, &ArchVariant::default(), InitPolicy::Standard, 0);
        let tape: Tape<f64> = Tape::new();
        let taped = TapedParams::from_store(&tape, &store);
        let w = taped.get("extractor.l0.c0.w");
        assert_eq!(w.shape(), &[16, 3, 3, 3]);
        let master = store.get("extractor.l0.c0.w");
        let lifted = w.value();
        for (a, b) in master.iter().zip(lifted.iter()) {
            assert_eq!(*a as f64, *b);
        }
        assert_eq!(taped.ids().count(), store.len());
    }
}
