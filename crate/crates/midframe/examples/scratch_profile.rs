//! Scratch timing harness (not part of the example set).

use std::time::Instant;

use midframe::config::{LossWeights, ModelConfig, RunConfig};
use midframe::cost::ArchVariant;
use midframe::data::{generate_synthetic_triplets, MotionSpec};
use midframe::extractor::{extract, pad_to_multiple};
use midframe::losses::total_loss;
use midframe::model::{forward, FlowMode};
use midframe::params::{InitPolicy, ParamStore, TapedParams};
use midframe::tape::Tape;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::with_base_width(2, 1);
    let variant = ArchVariant::default();
    let store = ParamStore::build(&cfg.model, &variant, InitPolicy::Standard, 0);
    let data = generate_synthetic_triplets(1, 128, &MotionSpec::mixed(), 0).unwrap();
    let t = &data[0];

    for kernels in [[3, 3, 3], [7, 7, 7], [7, 15, 15]] {
        let mut mc = cfg.model.clone();
        mc.highres_kernels = kernels;
        let store_k = ParamStore::build(&mc, &variant, InitPolicy::Standard, 0);
        for (label, residual) in [("stage1", false), ("stage2", true)] {
            let tape: Tape<f32> = Tape::new();
            let p = TapedParams::from_store(&tape, &store_k);
            let i0 = tape.leaf(t.first.clone());
            let i1 = tape.leaf(t.last.clone());
            let t0 = Instant::now();
            let out = forward(&p, &mc, &variant, i0, i1, residual, FlowMode::Original).unwrap();
            let t_fwd = t0.elapsed();
            let t0 = Instant::now();
            let gt = tape.leaf(t.middle.clone());
            let loss = total_loss(out.pred, gt, &LossWeights::default());
            let t_loss = t0.elapsed();
            let t0 = Instant::now();
            let _grads = tape.backward(loss.total);
            let t_bwd = t0.elapsed();
            println!(
                "k={kernels:?} {label}: fwd {:.0} ms, loss {:.0} ms, bwd {:.0} ms, nodes {}",
                t_fwd.as_secs_f64() * 1e3,
                t_loss.as_secs_f64() * 1e3,
                t_bwd.as_secs_f64() * 1e3,
                tape.len(),
            );
        }
    }

    let tape: Tape<f32> = Tape::new();
    let p = TapedParams::from_store(&tape, &store);
    let i0 = tape.leaf(t.first.clone());
    let i1 = tape.leaf(t.last.clone());
    let (i0p, _) = pad_to_multiple(i0, 32);
    let (i1p, _) = pad_to_multiple(i1, 32);
    let t0 = Instant::now();
    let (pyr0, pyr1) = extract(&p, &cfg.model, i0p, i1p);
    println!("extract: {:.0} ms, nodes {}", t0.elapsed().as_secs_f64() * 1e3, tape.len());
    let t0 = Instant::now();
    let imgs0: Vec<_> = (0..3).map(|l| midframe::warping::downsample_to_level(i0p, l)).collect();
    let imgs1: Vec<_> = (0..3).map(|l| midframe::warping::downsample_to_level(i1p, l)).collect();
    println!("img pyramids: {:.0} ms", t0.elapsed().as_secs_f64() * 1e3);
    let t0 = Instant::now();
    let est = midframe::flow::estimate_flow(&p, &cfg.model, &variant, &pyr0, &pyr1, &imgs0, &imgs1);
    println!("estimate_flow: {:.0} ms, nodes {}", t0.elapsed().as_secs_f64() * 1e3, tape.len());
    let t0 = Instant::now();
    let r = midframe::refine::refine(
        &p, &cfg.model, &variant, &pyr0, &pyr1, &imgs0, &imgs1, est.state,
    );
    println!("refine: {:.0} ms, nodes {}", t0.elapsed().as_secs_f64() * 1e3, tape.len());
    let t0 = Instant::now();
    let pred = midframe::ops::add(midframe::model::blend(i0p, i1p, est.state), r);
    let _ = pred.value();
    println!("blend+residual: {:.0} ms", t0.elapsed().as_secs_f64() * 1e3);

    // single-conv microbenches at 128x128
    use midframe::ops::{conv2d, Conv2dCfg, Padding};
    use ndarray::ArrayD;
    let bench = |name: &str, cin: usize, cout: usize, k: usize, groups: usize, reps: usize| {
        let tape: Tape<f32> = Tape::new();
        let x = tape.leaf(ArrayD::from_elem(ndarray::IxDyn(&[cin, 128, 128]), 0.5f32));
        let w = tape.leaf(ArrayD::from_elem(
            ndarray::IxDyn(&[cout, cin / groups, k, k]),
            0.01f32,
        ));
        let cfg = Conv2dCfg { stride: 1, padding: Padding::Same, groups };
        let t0 = Instant::now();
        let mut last = None;
        for _ in 0..reps {
            last = Some(conv2d(x, w, None, cfg));
        }
        let fwd = t0.elapsed().as_secs_f64() / reps as f64;
        let t0 = Instant::now();
        let _g = tape.backward(midframe::ops::mean(last.unwrap()));
        let bwd = t0.elapsed().as_secs_f64() / reps as f64;
        let flops = 2.0 * (k * k * cin * cout * 128 * 128 / groups) as f64;
        println!(
            "{name}: fwd {:.1} ms ({:.1} GF/s), bwd/run {:.1} ms",
            fwd * 1e3,
            flops / fwd / 1e9,
            bwd * 1e3
        );
    };
    bench("fuse 3x3 21->36", 21, 36, 3, 1, 10);
    bench("dw 15x15 36ch", 36, 36, 15, 36, 10);
    bench("dw 7x7 36ch", 36, 36, 7, 36, 10);
    bench("pw 1x1 36->36", 36, 36, 1, 1, 10);
    bench("head 3x3 36->5", 36, 5, 3, 1, 10);
}
