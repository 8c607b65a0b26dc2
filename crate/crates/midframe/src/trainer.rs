//! Two-stage training, the HD-aware fine-tune, and the evaluation loop.
//!
//! One process owns the weights; every source of randomness flows through a
//! single ChaCha stream restored from the checkpoint, so a fixed seed gives
//! bitwise-identical runs. Stage 1 trains the extractor and flow estimator
//! through the pure warp composition; stage 2 adds the residual and restarts
//! the optimizer; the HD fine-tune samples the flow path per batch.

use crate::checkpoint::{ensure_model_compat, Checkpoint, CheckpointError, OptState, RngState};
use crate::config::{RunConfig, Stage};
use crate::cost::ArchVariant;
use crate::data::{augment, hd_flow_path_sampler, AugmentationPolicy, DataError, Triplet};
use crate::extractor::pad_to_multiple;
use crate::losses::{charbonnier_loss, total_loss, LossReport};
use crate::metrics::{psnr, ssim, MetricError};
use crate::model::{blend, forward, FlowMode, Model, ModelError};
use crate::ops::{add, scale};
use crate::params::{InitPolicy, ParamStore, TapedParams};
use crate::tape::Tape;
use crate::warping::downsample_to_level;
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::{BTreeSet, HashMap, HashSet};

/// Global L2 norm above which gradients are rescaled.
pub const GRAD_CLIP_NORM: f64 = 1.0;
pub const ADAM_EPS: f64 = 1e-8;
/// Weight of each coarse-state Charbonnier term when `aux_supervision` is on.
pub const AUX_WEIGHT: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss {value} at step {step} (lr {lr:.3e}, {} path)", mode.as_str())]
    NonFiniteLoss { step: u64, value: f64, lr: f64, mode: FlowMode },
    #[error("`{found}` checkpoint where `{expected}` was required")]
    WrongStage { expected: &'static str, found: &'static str },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// One optimizer step's worth of telemetry; serializes to one JSONL record.
#[derive(Clone, Debug, serde::Serialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub charbonnier: f64,
    pub laplacian: f64,
    pub frequency: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub mode: FlowMode,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepRecord>,
    /// Trainable parameters that went some entire epoch without a nonzero
    /// gradient. Expected empty on any real dataset.
    pub dead_params: Vec<String>,
}

/// Cosine decay from `start` to `end` over `total` steps, endpoints exact.
pub fn cosine_lr(start: f64, end: f64, step: u64, total: u64) -> f64 {
    assert!(total > 0 && step < total, "step {step} outside schedule of {total}");
    if step == 0 {
        return start;
    }
    if step == total - 1 {
        return end;
    }
    let x = step as f64 / (total - 1) as f64;
    end + (start - end) * (1.0 + (std::f64::consts::PI * x).cos()) / 2.0
}

/// A blank training state for `stage`: freshly initialized weights, zeroed
/// optimizer moments, and the RNG stream at its origin.
pub fn fresh_checkpoint(cfg: &RunConfig, stage: Stage) -> Checkpoint {
    let weights = ParamStore::build(
        &cfg.model,
        &ArchVariant::default(),
        InitPolicy::Standard,
        cfg.train.seed,
    );
    let opt = OptState::fresh(&weights);
    Checkpoint {
        config: cfg.clone(),
        stage,
        step: 0,
        epoch: 0,
        weights,
        opt: Some(opt),
        rng: RngState { seed: cfg.train.seed, word_pos: 0 },
    }
}

/// Stage 1: extractor + flow estimator only, prediction is the pure warp
/// composition (residual forced to zero, refinement untouched).
pub fn train_stage1(
    data: &[Triplet],
    cfg: &RunConfig,
    policy: &AugmentationPolicy,
) -> Result<TrainOutcome, TrainError> {
    run_stage(fresh_checkpoint(cfg, Stage::FlowOnly), data, policy)
}

/// Stage 2: all parameters trainable, residual enabled, optimizer restarted.
/// The RNG stream continues from where stage 1 left it.
pub fn train_stage2(
    data: &[Triplet],
    cfg: &RunConfig,
    policy: &AugmentationPolicy,
    stage1: Checkpoint,
) -> Result<TrainOutcome, TrainError> {
    if stage1.stage != Stage::FlowOnly {
        return Err(TrainError::WrongStage {
            expected: Stage::FlowOnly.as_str(),
            found: stage1.stage.as_str(),
        });
    }
    ensure_model_compat(&cfg.model, &stage1.config.model)?;
    let opt = OptState::fresh(&stage1.weights);
    let start = Checkpoint {
        config: cfg.clone(),
        stage: Stage::Full,
        step: 0,
        epoch: 0,
        weights: stage1.weights,
        opt: Some(opt),
        rng: stage1.rng,
    };
    run_stage(start, data, policy)
}

/// One-stage control: the full model from scratch, for comparison against
/// the two-stage schedule at equal total steps.
pub fn train_one_stage(
    data: &[Triplet],
    cfg: &RunConfig,
    policy: &AugmentationPolicy,
) -> Result<TrainOutcome, TrainError> {
    run_stage(fresh_checkpoint(cfg, Stage::Full), data, policy)
}

/// HD-aware fine-tune from a stage-2 checkpoint: per batch the flow path is
/// drawn Bernoulli(`hd_aug_probability`), and the downscaled path estimates
/// flow at half resolution before lifting the state.
pub fn finetune_hd(
    data: &[Triplet],
    cfg: &RunConfig,
    policy: &AugmentationPolicy,
    stage2: Checkpoint,
) -> Result<TrainOutcome, TrainError> {
    if stage2.stage != Stage::Full {
        return Err(TrainError::WrongStage {
            expected: Stage::Full.as_str(),
            found: stage2.stage.as_str(),
        });
    }
    ensure_model_compat(&cfg.model, &stage2.config.model)?;
    let opt = OptState::fresh(&stage2.weights);
    let start = Checkpoint {
        config: cfg.clone(),
        stage: Stage::HdFinetune,
        step: 0,
        epoch: 0,
        weights: stage2.weights,
        opt: Some(opt),
        rng: stage2.rng,
    };
    run_stage(start, data, policy)
}

fn trainable_in(stage: Stage, name: &str) -> bool {
    match stage {
        Stage::FlowOnly => !name.starts_with("refine."),
        Stage::Full | Stage::HdFinetune => true,
    }
}

fn run_stage(
    mut ckpt: Checkpoint,
    data: &[Triplet],
    policy: &AugmentationPolicy,
) -> Result<TrainOutcome, TrainError> {
    assert_eq!(ckpt.step, 0, "stages train start to finish");
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let cfg = ckpt.config.clone();
    let stage = ckpt.stage;
    let use_residual = stage != Stage::FlowOnly;
    let variant = ArchVariant::default();
    let batch = cfg.train.batch_size.min(data.len());
    let steps_per_epoch = data.len().div_ceil(batch) as u64;
    let total_steps = steps_per_epoch * cfg.train.epochs as u64;

    let mut rng = ckpt.rng.restore();
    let mut opt = ckpt.opt.take().unwrap_or_else(|| OptState::fresh(&ckpt.weights));
    let trainable: Vec<bool> =
        ckpt.weights.iter().map(|(name, _)| trainable_in(stage, name)).collect();
    let mut history = Vec::with_capacity(total_steps as usize);
    let mut dead = BTreeSet::new();
    let mut alive_this_epoch: HashSet<usize> = HashSet::new();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for step in 0..total_steps {
        let epoch = step / steps_per_epoch;
        let within = (step % steps_per_epoch) as usize;
        if within == 0 {
            order.shuffle(&mut rng);
            alive_this_epoch.clear();
        }
        let lr = cosine_lr(cfg.train.lr_start, cfg.train.lr_end, step, total_steps);
        let mode = if stage == Stage::HdFinetune {
            hd_flow_path_sampler(cfg.train.hd_aug_probability, &mut rng)
        } else {
            FlowMode::Original
        };
        let ids = &order[within * batch..data.len().min((within + 1) * batch)];
        let samples: Vec<Triplet> = ids
            .iter()
            .map(|&i| augment(&data[i], policy, rng.gen()))
            .collect::<Result<_, _>>()?;

        let (report, grads, grad_norm) = {
            let tape: Tape<f32> = Tape::new();
            let p = TapedParams::from_store(&tape, &ckpt.weights);
            let mut batch_total = None;
            let mut reports: Vec<LossReport> = Vec::with_capacity(samples.len());
            for s in &samples {
                let i0 = tape.leaf(s.first.clone());
                let i1 = tape.leaf(s.last.clone());
                let gt = tape.leaf(s.middle.clone());
                let out = forward(&p, &cfg.model, &variant, i0, i1, use_residual, mode)?;
                let terms = total_loss(out.pred, gt, &cfg.loss);
                reports.push(terms.report());
                let mut sample_total = terms.total;
                if cfg.train.aux_supervision && mode == FlowMode::Original {
                    let (gt_p, _) = pad_to_multiple(gt, 32);
                    let hp = out.padded_inputs.0.shape()[1];
                    for s in &out.coarse_states {
                        let level = (hp / s.all.shape()[1]).trailing_zeros() as usize;
                        let a0 = downsample_to_level(out.padded_inputs.0, level);
                        let a1 = downsample_to_level(out.padded_inputs.1, level);
                        let gt_l = downsample_to_level(gt_p, level);
                        let aux = charbonnier_loss(blend(a0, a1, *s), gt_l);
                        sample_total = add(sample_total, scale(aux, AUX_WEIGHT));
                    }
                }
                batch_total = Some(match batch_total {
                    None => sample_total,
                    Some(acc) => add(acc, sample_total),
                });
            }
            let batch_mean = scale(batch_total.expect("non-empty batch"), 1.0 / samples.len() as f64);
            let mut grads_raw = tape.backward(batch_mean);

            let n = samples.len() as f64;
            let report = LossReport {
                charbonnier: reports.iter().map(|r| r.charbonnier).sum::<f64>() / n,
                laplacian: reports.iter().map(|r| r.laplacian).sum::<f64>() / n,
                frequency: reports.iter().map(|r| r.frequency).sum::<f64>() / n,
                total: reports.iter().map(|r| r.total).sum::<f64>() / n,
            };

            let id_of: HashMap<&str, usize> = p.ids().collect();
            let mut grads: Vec<Option<ndarray::ArrayD<f32>>> = Vec::with_capacity(ckpt.weights.len());
            let mut sq_sum = 0.0f64;
            for (i, (name, _)) in ckpt.weights.iter().enumerate() {
                if !trainable[i] {
                    grads.push(None);
                    continue;
                }
                let g = grads_raw.take_id(id_of[name]);
                if let Some(g) = &g {
                    let mut nonzero = false;
                    for &v in g.iter() {
                        sq_sum += (v as f64) * (v as f64);
                        nonzero |= v != 0.0;
                    }
                    if nonzero {
                        alive_this_epoch.insert(i);
                    }
                }
                grads.push(g);
            }
            (report, grads, sq_sum.sqrt())
        };

        if !report.total.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, value: report.total, lr, mode });
        }

        let clip = if grad_norm > GRAD_CLIP_NORM { GRAD_CLIP_NORM / grad_norm } else { 1.0 };
        opt.step += 1;
        let bc1 = 1.0 - cfg.train.beta1.powi(opt.step as i32);
        let bc2 = 1.0 - cfg.train.beta2.powi(opt.step as i32);
        for (i, (_, w)) in ckpt.weights.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut opt.m[i], &mut opt.v[i]);
            for ((wv, gv), (mv, vv)) in
                w.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                let gc = *gv as f64 * clip;
                let mn = cfg.train.beta1 * (*mv as f64) + (1.0 - cfg.train.beta1) * gc;
                let vn = cfg.train.beta2 * (*vv as f64) + (1.0 - cfg.train.beta2) * gc * gc;
                *mv = mn as f32;
                *vv = vn as f32;
                let update = (mn / bc1) / ((vn / bc2).sqrt() + ADAM_EPS)
                    + cfg.train.weight_decay * (*wv as f64);
                *wv = (*wv as f64 - lr * update) as f32;
            }
        }

        history.push(StepRecord {
            stage,
            step,
            epoch,
            lr,
            charbonnier: report.charbonnier,
            laplacian: report.laplacian,
            frequency: report.frequency,
            total: report.total,
            grad_norm,
            mode,
        });

        if within as u64 == steps_per_epoch - 1 {
            for (i, (name, _)) in ckpt.weights.iter().enumerate() {
                if trainable[i] && !alive_this_epoch.contains(&i) {
                    dead.insert(name.to_string());
                }
            }
            log::debug!(
                "stage {} epoch {epoch}: loss {:.6}, lr {lr:.3e}",
                stage.as_str(),
                report.total
            );
        }
    }

    ckpt.step = total_steps;
    ckpt.epoch = cfg.train.epochs as u64;
    ckpt.opt = Some(opt);
    ckpt.rng = RngState::capture(ckpt.rng.seed, &rng);
    Ok(TrainOutcome { checkpoint: ckpt, history, dead_params: dead.into_iter().collect() })
}

/// One evaluated triplet; serializes to one results-file record.
#[derive(Clone, Debug, serde::Serialize)]
pub struct EvalRow {
    pub source_id: String,
    pub psnr: f64,
    pub ssim: f64,
}

pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// PSNR/SSIM of the model's midpoint prediction against ground truth, per
/// triplet and averaged.
pub fn evaluate_model(
    model: &Model,
    data: &[Triplet],
    mode: FlowMode,
) -> Result<EvalSummary, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rows = Vec::with_capacity(data.len());
    for t in data {
        let out = model.interpolate(&t.first, &t.last, mode)?;
        rows.push(EvalRow {
            source_id: t.source_id.clone(),
            psnr: psnr(&out.frame, &t.middle)?,
            ssim: ssim(&out.frame, &t.middle)?,
        });
    }
    let n = rows.len() as f64;
    Ok(EvalSummary {
        mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{generate_synthetic_triplets, MotionClass, MotionSpec};

    fn tiny_cfg(epochs: usize) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig::with_base_width(2, 1);
        cfg.train.batch_size = 2;
        cfg.train.epochs = epochs;
        cfg.train.crop_size = 32;
        cfg.train.seed = 7;
        cfg
    }

    fn tiny_data(n: usize, size: usize) -> Vec<Triplet> {
        generate_synthetic_triplets(n, size, &MotionSpec::only(MotionClass::Small), 40).unwrap()
    }

    #[test]
    fn cosine_schedule_hits_both_endpoints_exactly() {
        let (s, e) = (2e-4, 2e-5);
        assert_eq!(cosine_lr(s, e, 0, 100), s);
        assert_eq!(cosine_lr(s, e, 99, 100), e);
        assert_eq!(cosine_lr(s, e, 0, 1), s);
        let lrs: Vec<f64> = (0..100).map(|i| cosine_lr(s, e, i, 100)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]), "schedule must not increase");
        assert!((lrs[50] - (s + e) / 2.0).abs() < 2e-6, "midpoint near the mean");
    }

    #[test]
    fn stage1_trains_flow_and_leaves_refinement_untouched() {
        let cfg = tiny_cfg(2);
        let data = tiny_data(2, 32);
        let init = fresh_checkpoint(&cfg, Stage::FlowOnly);
        let out = train_stage1(&data, &cfg, &AugmentationPolicy::identity()).unwrap();

        assert_eq!(out.history.len(), 2);
        assert!(out.history.iter().all(|r| r.total.is_finite() && r.grad_norm.is_finite()));
        assert_eq!(out.history[0].lr, cfg.train.lr_start);
        assert_eq!(out.history.last().unwrap().lr, cfg.train.lr_end);
        assert!(out.history.iter().all(|r| r.mode == FlowMode::Original));

        let mut flow_changed = false;
        for ((name, before), (_, after)) in init.weights.iter().zip(out.checkpoint.weights.iter()) {
            if name.starts_with("refine.") {
                assert_eq!(before, after, "{name} must stay untouched in stage 1");
            } else if before != after {
                flow_changed = true;
            }
        }
        assert!(flow_changed, "flow-path weights should move");
        assert_eq!(out.checkpoint.stage, Stage::FlowOnly);
        assert_eq!(out.checkpoint.step, 2);
    }

    #[test]
    fn identical_seeds_train_identically() {
        let cfg = tiny_cfg(2);
        let data = tiny_data(2, 32);
        let a = train_stage1(&data, &cfg, &AugmentationPolicy::flips_only()).unwrap();
        let b = train_stage1(&data, &cfg, &AugmentationPolicy::flips_only()).unwrap();
        assert_eq!(
            a.history.last().unwrap().total,
            b.history.last().unwrap().total,
            "same seed, same final loss"
        );
        for ((_, wa), (_, wb)) in a.checkpoint.weights.iter().zip(b.checkpoint.weights.iter()) {
            assert_eq!(wa, wb);
        }
        assert_eq!(a.checkpoint.rng, b.checkpoint.rng);
    }

    #[test]
    fn stage2_requires_a_stage1_checkpoint() {
        let cfg = tiny_cfg(1);
        let data = tiny_data(2, 32);
        let wrong = fresh_checkpoint(&cfg, Stage::Full);
        match train_stage2(&data, &cfg, &AugmentationPolicy::identity(), wrong) {
            Err(TrainError::WrongStage { expected, found }) => {
                assert_eq!(expected, "flow_only");
                assert_eq!(found, "full");
            }
            other => panic!("expected WrongStage, got {:?}", other.err()),
        }

        let mut other_width = tiny_cfg(1);
        other_width.model = ModelConfig::with_base_width(4, 1);
        let s1 = fresh_checkpoint(&cfg, Stage::FlowOnly);
        assert!(matches!(
            train_stage2(&data, &other_width, &AugmentationPolicy::identity(), s1),
            Err(TrainError::Checkpoint(CheckpointError::WidthMismatch { .. }))
        ));
    }

    #[test]
    fn hd_finetune_draws_the_flow_path_per_batch() {
        let data = tiny_data(2, 64);
        let mut cfg = tiny_cfg(1);
        let s2 = fresh_checkpoint(&cfg, Stage::Full);

        cfg.train.hd_aug_probability = 0.0;
        let orig = finetune_hd(&data, &cfg, &AugmentationPolicy::identity(), s2).unwrap();
        assert!(orig.history.iter().all(|r| r.mode == FlowMode::Original));

        cfg.train.hd_aug_probability = 1.0;
        let s2 = fresh_checkpoint(&cfg, Stage::Full);
        let down = finetune_hd(&data, &cfg, &AugmentationPolicy::identity(), s2).unwrap();
        assert!(down.history.iter().all(|r| r.mode == FlowMode::Downscaled));
        assert!(down.history.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn aux_supervision_changes_the_objective() {
        let data = tiny_data(2, 32);
        let mut cfg = tiny_cfg(1);
        cfg.train.batch_size = 2;
        let base = train_one_stage(&data, &cfg, &AugmentationPolicy::identity()).unwrap();
        cfg.train.aux_supervision = true;
        let aux = train_one_stage(&data, &cfg, &AugmentationPolicy::identity()).unwrap();
        // recorded reports exclude the aux term, but the updates differ
        let wa: Vec<_> = base.checkpoint.weights.iter().map(|(_, w)| w.clone()).collect();
        let wb: Vec<_> = aux.checkpoint.weights.iter().map(|(_, w)| w.clone()).collect();
        assert!(wa != wb, "aux term should alter the gradients");
        assert!(aux.history.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn poisoned_weights_abort_with_diagnostics() {
        let data = tiny_data(1, 32);
        let cfg = tiny_cfg(1);
        let mut start = fresh_checkpoint(&cfg, Stage::FlowOnly);
        start.weights.get_mut("extractor.l0.c0.w")[[0, 0, 0, 0]] = f32::NAN;
        match run_stage(start, &data, &AugmentationPolicy::identity()) {
            Err(TrainError::NonFiniteLoss { step, .. }) => assert_eq!(step, 0),
            Err(other) => panic!("expected NonFiniteLoss, got {other:?}"),
            Ok(_) => panic!("NaN weights must not train"),
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfg = tiny_cfg(1);
        assert!(matches!(
            train_stage1(&[], &cfg, &AugmentationPolicy::identity()),
            Err(TrainError::EmptyDataset)
        ));
        let model = Model::new(cfg.model.clone(), 0);
        assert!(matches!(
            evaluate_model(&model, &[], FlowMode::Original),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn fresh_model_is_perfect_on_static_scenes() {
        let data =
            generate_synthetic_triplets(2, 32, &MotionSpec::only(MotionClass::Static), 3).unwrap();
        let cfg = tiny_cfg(1);
        let model = Model::new(cfg.model, 11);
        let summary = evaluate_model(&model, &data, FlowMode::Original).unwrap();
        assert_eq!(summary.rows.len(), 2);
        assert_eq!(summary.mean_psnr, 99.0, "identity warp of identical frames");
        assert!((summary.mean_ssim - 1.0).abs() < 1e-9);
    }
}
