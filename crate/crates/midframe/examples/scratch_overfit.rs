//! Scratch overfit protocol validation (not part of the example set).

use std::time::Instant;

use midframe::config::{ModelConfig, RunConfig};
use midframe::data::{generate_synthetic_triplets, AugmentationPolicy, MotionSpec};
use midframe::model::{FlowMode, Model};
use midframe::trainer::{evaluate_model, train_one_stage, train_stage1, train_stage2};

fn main() {
    let data = generate_synthetic_triplets(8, 128, &MotionSpec::mixed(), 0).unwrap();
    let policy = AugmentationPolicy::identity();

    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::with_base_width(2, 1);
    cfg.train.batch_size = 1;
    cfg.train.seed = 0;

    let t0 = Instant::now();
    cfg.train.epochs = 63; // 504 steps at batch 1 over 8 triplets
    let s1 = train_stage1(&data, &cfg, &policy).unwrap();
    let t1 = t0.elapsed();
    let first = &s1.history[..10.min(s1.history.len())];
    let early: f64 = first.iter().map(|r| r.total).sum::<f64>() / first.len() as f64;
    let last = s1.history.last().unwrap().total;
    println!(
        "stage1: {} steps in {:.1}s, early loss {:.4} -> final {:.4} ({:.0}% drop)",
        s1.checkpoint.step,
        t1.as_secs_f64(),
        early,
        last,
        100.0 * (1.0 - last / early)
    );

    let t0 = Instant::now();
    cfg.train.epochs = 187; // 1496 steps
    let s2 = train_stage2(&data, &cfg, &policy, s1.checkpoint).unwrap();
    let t2 = t0.elapsed();
    println!(
        "stage2: {} steps in {:.1}s, final loss {:.4}",
        s2.checkpoint.step,
        t2.as_secs_f64(),
        s2.history.last().unwrap().total
    );

    let model = Model::from_store(cfg.model.clone(), s2.checkpoint.weights.clone());
    let ev = evaluate_model(&model, &data, FlowMode::Original).unwrap();
    println!("two-stage mean PSNR {:.2} dB, SSIM {:.4}", ev.mean_psnr, ev.mean_ssim);
    for r in &ev.rows {
        println!("  {}: {:.2} dB", r.source_id, r.psnr);
    }

    let t0 = Instant::now();
    cfg.train.epochs = 250; // 2000 steps, equal total
    let one = train_one_stage(&data, &cfg, &policy).unwrap();
    let t3 = t0.elapsed();
    let model1 = Model::from_store(cfg.model.clone(), one.checkpoint.weights.clone());
    let ev1 = evaluate_model(&model1, &data, FlowMode::Original).unwrap();
    println!(
        "one-stage: 2000 steps in {:.1}s, mean PSNR {:.2} dB",
        t3.as_secs_f64(),
        ev1.mean_psnr
    );
    println!(
        "two-stage {:.2} vs one-stage {:.2} -> margin {:+.2} dB",
        ev.mean_psnr,
        ev1.mean_psnr,
        ev.mean_psnr - ev1.mean_psnr
    );
}
