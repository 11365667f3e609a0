//! Training loops: feature and mixed distillation pretraining, segmentation
//! finetuning, and the ablation sweep. Every loop is deterministic under a
//! fixed seed and a single-threaded data path, and every run produces a
//! MetricsReport whose numbers can be regenerated from checkpoint + seed.

use crate::backbone::{build_backbone, Backbone, BackboneConfig};
use crate::config::{DataConfig, ExperimentConfig};
use crate::dataset::{
    generate_shapes_dataset, iterate_encoded, iterate_synthesized, DataMode, FeatureRecord,
    RecordStream,
};
use crate::error::{Error, Result};
use crate::interpreter::{emit_soft_labels, TrainedInterpreter};
use crate::losses::{
    at_distill_loss, interpreter_loss, label_distill_loss, mse_distill_loss, DistillConfig,
};
use crate::metrics::{
    argmax_classes, downsample_mask, ConfusionMatrix, EpochLoss, MetricsReport,
};
use crate::nn::{BatchNorm2d, Conv2d, Forward, ParamStore};
use crate::optim::{lr_at_step, AdamW};
use crate::pyramid::FeaturePyramid;
use crate::regressor::{build_regressor, Regressor, RegressorConfig};
use crate::seeding::{keyed_rng, shuffled_indices};
use crate::teacher::{DiffusionTeacher, EncodeVariant};
use crate::tensor::{ops, Scalar, Tape, Var};
use ndarray::{ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

fn default_base_lr() -> f64 {
    4e-3
}
fn default_weight_decay() -> f64 {
    0.05
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.95)
}

/// Optimizer and schedule knobs shared by every training loop: AdamW with
/// decoupled weight decay under a cosine schedule with linear warmup.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            base_lr: default_base_lr(),
            weight_decay: default_weight_decay(),
            betas: default_betas(),
            warmup_epochs: 1,
            epochs: 20,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::config("base_lr must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::config("betas must lie in [0,1)"));
        }
        Ok(())
    }
}

/// Per-epoch record streams. Called once per epoch so stochastic encoding
/// can redraw noise while cached replays stay cheap.
pub type StreamFactory<'a> = dyn FnMut(usize) -> Result<RecordStream> + 'a;

pub struct PretrainOutcome<S: Scalar> {
    pub store: ParamStore<S>,
    pub backbone: Backbone,
    pub regressor: Regressor,
    pub report: MetricsReport,
}

/// Stacks record images and per-level teacher features into batch arrays.
fn collate_records<S: Scalar>(
    records: &[FeatureRecord],
) -> Result<(ArrayD<S>, FeaturePyramid<ArrayD<S>>)> {
    let b = records.len();
    let ishape = records[0].image.shape();
    let mut images = ArrayD::<S>::zeros(IxDyn(&[b, ishape[0], ishape[1], ishape[2]]));
    for (row, r) in records.iter().enumerate() {
        if r.image.shape() != ishape {
            return Err(Error::shape("records in one batch must share a resolution"));
        }
        images
            .index_axis_mut(Axis(0), row)
            .assign(&r.image.mapv(|v| S::from_f64(v as f64)));
    }
    let first = &records[0].teacher_features;
    let mut levels = Vec::with_capacity(first.len());
    for (l, t0) in first.iter() {
        let mut shape = t0.shape().to_vec();
        shape[0] = b;
        let mut out = ArrayD::<S>::zeros(IxDyn(&shape));
        for (row, r) in records.iter().enumerate() {
            let src = r
                .teacher_features
                .get(l)
                .ok_or_else(|| Error::shape(format!("record missing level {l}")))?;
            out.index_axis_mut(Axis(0), row)
                .assign(&src.index_axis(Axis(0), 0).mapv(|v| S::from_f64(v as f64)));
        }
        levels.push((l, out));
    }
    let pyr = FeaturePyramid::new(levels, first.input_resolution())?;
    Ok((images, pyr))
}

fn collate_soft<S: Scalar>(records: &[FeatureRecord]) -> Result<ArrayD<S>> {
    let first = records[0]
        .soft_logits
        .as_ref()
        .ok_or_else(|| Error::config("mixed distillation requires records with soft_logits"))?;
    let mut shape = vec![records.len()];
    shape.extend_from_slice(first.shape());
    let mut out = ArrayD::<S>::zeros(IxDyn(&shape));
    for (row, r) in records.iter().enumerate() {
        let soft = r
            .soft_logits
            .as_ref()
            .ok_or_else(|| Error::config("mixed distillation requires records with soft_logits"))?;
        out.index_axis_mut(Axis(0), row)
            .assign(&soft.mapv(|v| S::from_f64(v as f64)));
    }
    Ok(out)
}

/// Pinpoints the first pyramid level whose loss went non-finite.
fn diagnose_nonfinite<S: Scalar>(
    preds: &FeaturePyramid<ArrayD<S>>,
    targets: &FeaturePyramid<ArrayD<S>>,
    distill: &DistillConfig,
    step: usize,
) -> Error {
    for &l in &distill.levels {
        let mut cfg = distill.clone();
        cfg.levels = vec![l];
        let tape = Tape::<S>::new();
        let p = preds.to_tape(&tape, false);
        let t = targets.to_tape(&tape, false);
        if let Ok(v) = mse_distill_loss(&tape, &p, &t, &cfg) {
            if !tape.scalar(v).to_f64().is_finite() {
                return Error::numeric(format!(
                    "non-finite regression loss at level {l}, step {step}"
                ));
            }
        }
        if let Ok(v) = at_distill_loss(&tape, &p, &t, &cfg) {
            if !tape.scalar(v).to_f64().is_finite() {
                return Error::numeric(format!(
                    "non-finite attention loss at level {l}, step {step}"
                ));
            }
        }
    }
    Error::numeric(format!("non-finite distillation loss at step {step}"))
}

struct PretrainLoop<'a, S: Scalar> {
    store: ParamStore<S>,
    backbone: Backbone,
    regressor: Regressor,
    /// Student logit head for label distillation, absent in feature-only runs.
    head: Option<(Conv2d, usize)>,
    distill: &'a DistillConfig,
    run: &'a RunConfig,
}

fn pretrain_impl<S: Scalar>(
    backbone_cfg: &BackboneConfig,
    regressor_cfg: &RegressorConfig,
    num_classes: Option<usize>,
    streams: &mut StreamFactory<'_>,
    dataset_len: usize,
    distill: &DistillConfig,
    run: &RunConfig,
    run_id: &str,
) -> Result<PretrainOutcome<S>> {
    run.validate()?;
    distill.validate()?;
    if dataset_len == 0 {
        return Err(Error::config("pretraining needs a non-empty dataset"));
    }
    let started = Instant::now();
    let mut store = ParamStore::<S>::new();
    let backbone = build_backbone(&mut store, "backbone", backbone_cfg)?;
    let regressor =
        build_regressor(&mut store, "regressor", regressor_cfg, backbone_cfg.stage_channels)?;
    let head = match num_classes {
        Some(k) => {
            if k < 2 {
                return Err(Error::config("label distillation needs at least 2 classes"));
            }
            let in_ch = *regressor_cfg
                .teacher_channels
                .get(&2)
                .ok_or_else(|| Error::config("teacher channel table missing level 2"))?;
            let mut rng = keyed_rng(&[run.seed, 0x4ead]);
            Some((
                Conv2d::new(&mut store, &mut rng, "head.logits", in_ch, k, 1, 1, 0, 1, true),
                k,
            ))
        }
        None => None,
    };
    let mut lp = PretrainLoop { store, backbone, regressor, head, distill, run };

    let steps_per_epoch = dataset_len.div_ceil(run.batch_size);
    let total_steps = steps_per_epoch * run.epochs;
    let warmup_steps = steps_per_epoch * run.warmup_epochs;
    let mut opt = AdamW::new(run.betas, 1e-8, run.weight_decay);
    let mut report = MetricsReport::new(
        run_id,
        run.seed,
        serde_json::json!({
            "backbone": backbone_cfg,
            "regressor": regressor_cfg,
            "distill": distill,
            "run": run,
        }),
    );

    let mut step = 0usize;
    for epoch in 0..run.epochs {
        let mut stream = streams(epoch)?;
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut seen = 0usize;
        let mut batch: Vec<FeatureRecord> = Vec::with_capacity(run.batch_size);
        loop {
            let item = stream.next();
            match item {
                Some(record) => {
                    batch.push(record?);
                    if batch.len() < run.batch_size {
                        continue;
                    }
                }
                None => {
                    if batch.is_empty() {
                        break;
                    }
                }
            }
            let rows = batch.len();
            let lr = lr_at_step(run.base_lr, step, total_steps, warmup_steps);
            let (total, mse, at, ld) = pretrain_step(&mut lp, &batch, &mut opt, lr, step)?;
            sums.0 += total * rows as f64;
            sums.1 += mse * rows as f64;
            sums.2 += at * rows as f64;
            sums.3 += ld * rows as f64;
            seen += rows;
            step += 1;
            batch.clear();
        }
        if seen == 0 {
            return Err(Error::config("dataset stream yielded no records"));
        }
        let n = seen as f64;
        report.epoch_losses.push(EpochLoss {
            epoch,
            total: sums.0 / n,
            mse: sums.1 / n,
            at: sums.2 / n,
            ld: sums.3 / n,
        });
    }
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok(PretrainOutcome {
        store: lp.store,
        backbone: lp.backbone,
        regressor: lp.regressor,
        report,
    })
}

fn pretrain_step<S: Scalar>(
    lp: &mut PretrainLoop<'_, S>,
    batch: &[FeatureRecord],
    opt: &mut AdamW,
    lr: f64,
    step: usize,
) -> Result<(f64, f64, f64, f64)> {
    let (images, targets) = collate_records::<S>(batch)?;
    let soft = match &lp.head {
        Some(_) if lp.distill.lambda_ld > 0.0 => Some(collate_soft::<S>(batch)?),
        _ => None,
    };
    let tape = Tape::<S>::new();
    let mut preds_arrays: Option<FeaturePyramid<ArrayD<S>>> = None;
    let components;
    let grads_list;
    {
        let mut rng = keyed_rng(&[lp.run.seed, 30, step as u64]);
        let mut f = Forward::new(&tape, &mut lp.store, &mut rng, true);
        let x = tape.constant(images);
        let student = lp.backbone.forward_features(&mut f, x)?;
        let preds = lp.regressor.forward(&mut f, &student)?;
        let target_vars = targets.to_tape(&tape, false);
        let mse = mse_distill_loss(&tape, &preds, &target_vars, lp.distill)?;
        let at = if lp.distill.lambda_at > 0.0 {
            Some(at_distill_loss(&tape, &preds, &target_vars, lp.distill)?)
        } else {
            None
        };
        let mut loss = mse;
        if let Some(at) = at {
            loss = ops::add(&tape, loss, ops::scale(&tape, at, lp.distill.lambda_at));
        }
        let ld = match (&lp.head, &soft) {
            (Some((head, _)), Some(soft)) => {
                let student_logits = head.forward(&mut f, *preds.get(2).unwrap());
                let teacher_logits = tape.constant(soft.clone());
                let ld = label_distill_loss(&tape, teacher_logits, student_logits, lp.distill)?;
                loss = ops::add(&tape, loss, ops::scale(&tape, ld, lp.distill.lambda_ld));
                Some(ld)
            }
            _ => None,
        };
        let value = |v: Var| tape.scalar(v).to_f64();
        let total = value(loss);
        if !total.is_finite() {
            preds_arrays = Some(preds.to_arrays(&tape));
            components = (total, 0.0, 0.0, 0.0);
        } else {
            components = (
                total,
                value(mse),
                at.map_or(0.0, value),
                ld.map_or(0.0, value),
            );
        }
        let mut grads = tape.backward(loss);
        grads_list = f
            .bound_leaves()
            .into_iter()
            .map(|(name, var)| (name, grads.take(var).expect("leaf grad")))
            .collect::<Vec<_>>();
    }
    if !components.0.is_finite() {
        return Err(diagnose_nonfinite(
            preds_arrays.as_ref().unwrap(),
            &targets,
            lp.distill,
            step,
        ));
    }
    opt.step(&mut lp.store, &grads_list, lr);
    Ok(components)
}

/// Feature-only pretraining: the student regresses whitened teacher
/// features plus attention maps. Returns the trained store (backbone and
/// regressor prefixes) with the per-epoch loss curve.
pub fn pretrain_feature_distill<S: Scalar>(
    backbone_cfg: &BackboneConfig,
    regressor_cfg: &RegressorConfig,
    streams: &mut StreamFactory<'_>,
    dataset_len: usize,
    distill: &DistillConfig,
    run: &RunConfig,
    run_id: &str,
) -> Result<PretrainOutcome<S>> {
    pretrain_impl(
        backbone_cfg,
        regressor_cfg,
        None,
        streams,
        dataset_len,
        distill,
        run,
        run_id,
    )
}

/// Mixed distillation: feature loss plus soft-label cross-entropy from a
/// 1x1 logit head on the stride-4 regressed feature. Records must carry
/// soft_logits when lambda_ld > 0; ground-truth labels are never read.
pub fn pretrain_mix_distill<S: Scalar>(
    backbone_cfg: &BackboneConfig,
    regressor_cfg: &RegressorConfig,
    num_classes: usize,
    streams: &mut StreamFactory<'_>,
    dataset_len: usize,
    distill: &DistillConfig,
    run: &RunConfig,
    run_id: &str,
) -> Result<PretrainOutcome<S>> {
    pretrain_impl(
        backbone_cfg,
        regressor_cfg,
        Some(num_classes),
        streams,
        dataset_len,
        distill,
        run,
        run_id,
    )
}

/// Lightweight FPN decoder: per-level 1x1 laterals summed top-down with
/// nearest upsampling, a fused 3x3 stage, and a 1x1 classifier at stride 4.
pub struct SegHead {
    laterals: Vec<Conv2d>,
    fuse: Conv2d,
    fuse_bn: BatchNorm2d,
    logits: Conv2d,
}

pub fn build_seg_head<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    in_channels: [usize; 4],
    head_channels: usize,
    num_classes: usize,
    seed: u64,
) -> Result<SegHead> {
    if num_classes < 2 {
        return Err(Error::config("segmentation needs at least 2 classes"));
    }
    if head_channels == 0 {
        return Err(Error::config("head_channels must be positive"));
    }
    let mut rng = keyed_rng(&[seed, 0x5e9]);
    let laterals = (0..4)
        .map(|i| {
            Conv2d::new(
                store,
                &mut rng,
                &format!("{prefix}.lateral{}", i + 2),
                in_channels[i],
                head_channels,
                1,
                1,
                0,
                1,
                true,
            )
        })
        .collect();
    let fuse = Conv2d::new(
        store,
        &mut rng,
        &format!("{prefix}.fuse.conv"),
        head_channels,
        head_channels,
        3,
        1,
        1,
        1,
        false,
    );
    let fuse_bn = BatchNorm2d::new(store, &format!("{prefix}.fuse.bn"), head_channels);
    let logits = Conv2d::new(
        store,
        &mut rng,
        &format!("{prefix}.logits"),
        head_channels,
        num_classes,
        1,
        1,
        0,
        1,
        true,
    );
    Ok(SegHead { laterals, fuse, fuse_bn, logits })
}

impl SegHead {
    /// Stride-4 class logits from backbone levels {2..5}.
    pub fn forward<S: Scalar>(
        &self,
        f: &mut Forward<'_, S>,
        pyr: &FeaturePyramid<Var>,
    ) -> Result<Var> {
        if pyr.level_indices() != vec![2, 3, 4, 5] {
            return Err(Error::shape(format!(
                "segmentation head needs levels 2..5, got {:?}",
                pyr.level_indices()
            )));
        }
        let mut top = self.laterals[3].forward(f, *pyr.get(5).unwrap());
        for l in [4u8, 3, 2] {
            let lat = self.laterals[(l - 2) as usize].forward(f, *pyr.get(l).unwrap());
            let up = crate::tensor::conv::upsample_nearest2x(f.tape, top);
            top = ops::add(f.tape, lat, up);
        }
        let x = self.fuse.forward(f, top);
        let x = self.fuse_bn.forward(f, x);
        let x = ops::relu(f.tape, x);
        Ok(self.logits.forward(f, x))
    }
}

pub struct FinetuneOutcome<S: Scalar> {
    pub store: ParamStore<S>,
    pub backbone: Backbone,
    pub head: SegHead,
    pub report: MetricsReport,
}

const SEG_HEAD_CHANNELS: usize = 64;

fn check_mask_classes(masks: &ArrayD<u8>, num_classes: usize, what: &str) -> Result<()> {
    for &m in masks.iter() {
        if m != crate::losses::IGNORE_INDEX && m as usize >= num_classes {
            return Err(Error::config(format!(
                "{what} mask label {m} exceeds configured class count {num_classes}"
            )));
        }
    }
    Ok(())
}

/// Finetunes (or trains from random init when `pretrained` is None) a
/// backbone plus segmentation head. With `freeze` the backbone is a frozen
/// readout: its parameters and running statistics stay untouched.
#[allow(clippy::too_many_arguments)]
pub fn finetune_segmentation<S: Scalar>(
    pretrained: Option<&ParamStore<S>>,
    backbone_cfg: &BackboneConfig,
    train_images: &ArrayD<S>,
    train_masks: &ArrayD<u8>,
    eval_images: &ArrayD<S>,
    eval_masks: &ArrayD<u8>,
    num_classes: usize,
    distill: &DistillConfig,
    run: &RunConfig,
    freeze: bool,
    run_id: &str,
) -> Result<FinetuneOutcome<S>> {
    run.validate()?;
    distill.validate()?;
    let n = train_images.shape()[0];
    if n == 0 || eval_images.shape()[0] == 0 {
        return Err(Error::config("finetuning needs train and eval samples"));
    }
    if train_masks.shape()[0] != n || eval_masks.shape()[0] != eval_images.shape()[0] {
        return Err(Error::shape("one mask per image required"));
    }
    check_mask_classes(train_masks, num_classes, "train")?;
    check_mask_classes(eval_masks, num_classes, "eval")?;
    let started = Instant::now();

    let mut store = ParamStore::<S>::new();
    let backbone = build_backbone(&mut store, "backbone", backbone_cfg)?;
    let head = build_seg_head(
        &mut store,
        "seghead",
        backbone_cfg.stage_channels,
        SEG_HEAD_CHANNELS,
        num_classes,
        run.seed,
    )?;
    if let Some(src) = pretrained {
        store.adopt(src, "backbone")?;
    }
    if freeze {
        store.set_trainable_prefix("backbone", false);
    }

    let train_small = downsample_mask(train_masks, 4);
    let eval_small = downsample_mask(eval_masks, 4);
    let bs = run.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs);
    let total_steps = steps_per_epoch * run.epochs;
    let warmup_steps = steps_per_epoch * run.warmup_epochs;
    let mut opt = AdamW::new(run.betas, 1e-8, run.weight_decay);
    let mut report = MetricsReport::new(
        run_id,
        run.seed,
        serde_json::json!({
            "backbone": backbone_cfg,
            "distill": distill,
            "run": run,
            "freeze": freeze,
            "num_classes": num_classes,
            "pretrained": pretrained.is_some(),
        }),
    );

    let mut step = 0usize;
    for epoch in 0..run.epochs {
        let order = shuffled_indices(&mut keyed_rng(&[run.seed, 20, epoch as u64]), n);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for rows in order.chunks(bs) {
            let images = stack_rows(train_images, rows);
            let masks = stack_rows_u8(&train_small, rows);
            let tape = Tape::<S>::new();
            let grads_list;
            let total;
            {
                let mut rng = keyed_rng(&[run.seed, 21, step as u64]);
                let mut f = Forward::new(&tape, &mut store, &mut rng, true);
                let x = tape.constant(images);
                let pyr = backbone.forward_features(&mut f, x)?;
                let logits = head.forward(&mut f, &pyr)?;
                let loss = interpreter_loss(&tape, logits, &masks, distill)?;
                total = tape.scalar(loss).to_f64();
                if !total.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite segmentation loss at step {step}"
                    )));
                }
                let mut grads = tape.backward(loss);
                grads_list = f
                    .bound_leaves()
                    .into_iter()
                    .map(|(name, var)| (name, grads.take(var).expect("leaf grad")))
                    .collect::<Vec<_>>();
            }
            let lr = lr_at_step(run.base_lr, step, total_steps, warmup_steps);
            opt.step(&mut store, &grads_list, lr);
            loss_sum += total * rows.len() as f64;
            seen += rows.len();
            step += 1;
        }
        report.epoch_losses.push(EpochLoss {
            epoch,
            total: loss_sum / seen as f64,
            mse: 0.0,
            at: 0.0,
            ld: 0.0,
        });
    }

    let (miou, pixacc) =
        evaluate_segmentation(&mut store, &backbone, &head, eval_images, &eval_small, num_classes, bs)?;
    report.final_metrics.miou = Some(miou);
    report.final_metrics.pixel_accuracy = Some(pixacc);
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok(FinetuneOutcome { store, backbone, head, report })
}

/// Held-out mIoU and pixel accuracy at stride 4.
pub fn evaluate_segmentation<S: Scalar>(
    store: &mut ParamStore<S>,
    backbone: &Backbone,
    head: &SegHead,
    images: &ArrayD<S>,
    small_masks: &ArrayD<u8>,
    num_classes: usize,
    batch: usize,
) -> Result<(f64, f64)> {
    let n = images.shape()[0];
    let rows: Vec<usize> = (0..n).collect();
    let mut cm = ConfusionMatrix::new(num_classes);
    for chunk in rows.chunks(batch.max(1)) {
        let x = stack_rows(images, chunk);
        let masks = stack_rows_u8(small_masks, chunk);
        let tape = Tape::<S>::new();
        let mut rng = keyed_rng(&[0]);
        let mut f = Forward::new(&tape, store, &mut rng, false);
        let xv = tape.constant(x);
        let pyr = backbone.forward_features(&mut f, xv)?;
        let logits = head.forward(&mut f, &pyr)?;
        let lv = tape.value(logits);
        cm.update(&argmax_classes(&lv), &masks)?;
    }
    Ok((cm.miou(), cm.pixel_accuracy()))
}

fn stack_rows<S: Scalar>(source: &ArrayD<S>, rows: &[usize]) -> ArrayD<S> {
    let mut shape = source.shape().to_vec();
    shape[0] = rows.len();
    let mut out = ArrayD::<S>::zeros(IxDyn(&shape));
    for (slot, &r) in rows.iter().enumerate() {
        out.index_axis_mut(Axis(0), slot)
            .assign(&source.index_axis(Axis(0), r));
    }
    out
}

fn stack_rows_u8(source: &ArrayD<u8>, rows: &[usize]) -> ArrayD<u8> {
    let mut shape = source.shape().to_vec();
    shape[0] = rows.len();
    let mut out = ArrayD::<u8>::zeros(IxDyn(&shape));
    for (slot, &r) in rows.iter().enumerate() {
        out.index_axis_mut(Axis(0), slot)
            .assign(&source.index_axis(Axis(0), r));
    }
    out
}

/// Disjoint splits of one deterministic synthetic dataset: unlabeled
/// images for pretraining, labeled train and eval sets for the readout.
pub struct PipelineData {
    pub unlabeled: Arc<ArrayD<f32>>,
    pub labeled_images: ArrayD<f32>,
    pub labeled_masks: ArrayD<u8>,
    pub eval_images: ArrayD<f32>,
    pub eval_masks: ArrayD<u8>,
}

pub fn make_pipeline_data(cfg: &DataConfig) -> Result<PipelineData> {
    cfg.validate()?;
    let total = cfg.n_unlabeled + cfg.n_labeled + cfg.n_eval;
    let (images, masks) = generate_shapes_dataset(total, cfg.classes, cfg.resolution, cfg.seed)?;
    let slice = |lo: usize, hi: usize| {
        images
            .slice_axis(Axis(0), ndarray::Slice::from(lo..hi))
            .to_owned()
            .into_dyn()
    };
    let mslice = |lo: usize, hi: usize| {
        masks
            .slice_axis(Axis(0), ndarray::Slice::from(lo..hi))
            .to_owned()
            .into_dyn()
    };
    let a = cfg.n_unlabeled;
    let b = a + cfg.n_labeled;
    let c = b + cfg.n_eval;
    Ok(PipelineData {
        unlabeled: Arc::new(slice(0, a)),
        labeled_images: slice(a, b),
        labeled_masks: mslice(a, b),
        eval_images: slice(b, c),
        eval_masks: mslice(b, c),
    })
}

/// Attaches interpreter soft labels to every record in a stream, lazily.
pub fn attach_soft_labels(
    stream: RecordStream,
    interpreter: Arc<TrainedInterpreter<f32>>,
) -> RecordStream {
    Box::new(stream.map(move |item| {
        let mut record = item?;
        let logits = emit_soft_labels(
            &interpreter.interpreter,
            &interpreter.store,
            &record.teacher_features,
        )?;
        record.soft_logits = Some(logits.index_axis(Axis(0), 0).to_owned().into_dyn());
        Ok(record)
    }))
}

/// Per-epoch stream factory for the configured dataset mode. Mixed runs
/// (lambda_ld > 0) require a trained interpreter for soft labels.
pub fn make_stream_factory<'a>(
    cfg: &ExperimentConfig,
    teacher: &Arc<DiffusionTeacher<f32>>,
    interpreter: Option<&Arc<TrainedInterpreter<f32>>>,
    data: &PipelineData,
) -> Result<Box<StreamFactory<'a>>> {
    let teacher = Arc::clone(teacher);
    let spec = cfg.dataset;
    let needs_soft = cfg.distill.lambda_ld > 0.0;
    let interpreter = match (needs_soft, interpreter) {
        (true, None) => {
            return Err(Error::config(
                "mixed distillation requires a trained interpreter for soft labels",
            ))
        }
        (true, Some(i)) => Some(Arc::clone(i)),
        (false, _) => None,
    };
    let unlabeled = Arc::clone(&data.unlabeled);
    let n = cfg.data.n_unlabeled;
    let encode_batch = cfg.teacher.batch_size.max(1);
    let seed = cfg.run.seed;
    Ok(Box::new(move |epoch| {
        let stream = match spec.mode {
            DataMode::Encoded => iterate_encoded(
                Arc::clone(&teacher),
                Arc::clone(&unlabeled),
                spec,
                epoch,
                encode_batch,
            )?,
            DataMode::Synthesized => {
                iterate_synthesized(Arc::clone(&teacher), n, spec, seed, encode_batch)?
            }
        };
        Ok(match &interpreter {
            Some(i) => attach_soft_labels(stream, Arc::clone(i)),
            None => stream,
        })
    }))
}

pub struct PipelineReports {
    pub pretrain: MetricsReport,
    pub finetune: MetricsReport,
}

/// One full cycle: backbone pretraining against the teacher, then
/// supervised finetuning on the labeled split.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    teacher: &Arc<DiffusionTeacher<f32>>,
    interpreter: Option<&Arc<TrainedInterpreter<f32>>>,
    data: &PipelineData,
    run_id: &str,
) -> Result<PipelineReports> {
    cfg.validate()?;
    let mut streams = make_stream_factory(cfg, teacher, interpreter, data)?;
    let pretrained = if cfg.distill.lambda_ld > 0.0 {
        pretrain_mix_distill::<f32>(
            &cfg.backbone,
            &cfg.regressor,
            cfg.data.classes,
            &mut *streams,
            cfg.data.n_unlabeled,
            &cfg.distill,
            &cfg.run,
            &format!("{run_id}-pretrain"),
        )?
    } else {
        pretrain_feature_distill::<f32>(
            &cfg.backbone,
            &cfg.regressor,
            &mut *streams,
            cfg.data.n_unlabeled,
            &cfg.distill,
            &cfg.run,
            &format!("{run_id}-pretrain"),
        )?
    };
    let finetune = finetune_segmentation::<f32>(
        Some(&pretrained.store),
        &cfg.backbone,
        &data.labeled_images,
        &data.labeled_masks,
        &data.eval_images,
        &data.eval_masks,
        cfg.data.classes,
        &cfg.distill,
        &cfg.run,
        false,
        &format!("{run_id}-finetune"),
    )?;
    Ok(PipelineReports { pretrain: pretrained.report, finetune: finetune.report })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    EncodeMode,
    TEncode,
    LossVariant,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encode_mode" => Ok(SweepAxis::EncodeMode),
            "t_encode" => Ok(SweepAxis::TEncode),
            "loss_variant" => Ok(SweepAxis::LossVariant),
            other => Err(Error::config(format!(
                "unknown sweep axis {other}, expected encode_mode | t_encode | loss_variant"
            ))),
        }
    }
}

pub struct SweepRow {
    pub value: String,
    pub pretrain: MetricsReport,
    pub finetune: MetricsReport,
}

pub struct SweepOutcome {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepOutcome {
    /// Comparison table, one row per swept value.
    pub fn markdown_table(&self) -> String {
        let mut out = String::from("| value | final pretrain loss | mIoU | pixel acc |\n");
        out.push_str("|---|---|---|---|\n");
        for row in &self.rows {
            let last = row.pretrain.epoch_losses.last().map_or(f64::NAN, |e| e.total);
            out.push_str(&format!(
                "| {} | {:.6} | {:.2} | {:.2} |\n",
                row.value,
                last,
                row.finetune.final_metrics.miou.unwrap_or(f64::NAN),
                row.finetune.final_metrics.pixel_accuracy.unwrap_or(f64::NAN),
            ));
        }
        out
    }
}

fn apply_axis(cfg: &mut ExperimentConfig, axis: SweepAxis, value: &str) -> Result<()> {
    match axis {
        SweepAxis::EncodeMode => {
            cfg.dataset.encode.variant = match value {
                "deterministic" => EncodeVariant::Deterministic,
                "stochastic" => EncodeVariant::Stochastic,
                other => {
                    return Err(Error::config(format!("unknown encode mode {other}")))
                }
            };
        }
        SweepAxis::TEncode => {
            let t: usize = value
                .parse()
                .map_err(|_| Error::config(format!("t_encode value {value} is not an integer")))?;
            cfg.dataset.encode.t_encode = t;
        }
        SweepAxis::LossVariant => match value {
            "mse" => {
                cfg.distill.lambda_at = 0.0;
                cfg.distill.lambda_ld = 0.0;
            }
            "feat" => {
                cfg.distill.lambda_ld = 0.0;
            }
            "mix" => {
                if cfg.distill.lambda_ld == 0.0 {
                    cfg.distill.lambda_ld = 1.0;
                }
            }
            other => return Err(Error::config(format!("unknown loss variant {other}"))),
        },
    }
    Ok(())
}

/// Asserts the encoding-mode contract on the first unlabeled image:
/// deterministic features are epoch-stable, stochastic ones redraw noise.
fn assert_encode_contract(
    cfg: &ExperimentConfig,
    teacher: &DiffusionTeacher<f32>,
    data: &PipelineData,
) -> Result<()> {
    let probe = data
        .unlabeled
        .index_axis(Axis(0), 0)
        .insert_axis(Axis(0))
        .to_owned()
        .into_dyn();
    let a = teacher.encode_features(&probe, &cfg.dataset.encode, &[0], 0)?;
    let b = teacher.encode_features(&probe, &cfg.dataset.encode, &[0], 1)?;
    let mut max_diff = 0.0f64;
    let mut differing = 0usize;
    let mut total = 0usize;
    for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
        for (u, v) in x.iter().zip(y.iter()) {
            let d = (*u as f64 - *v as f64).abs();
            max_diff = max_diff.max(d);
            if u.to_bits() != v.to_bits() {
                differing += 1;
            }
            total += 1;
        }
    }
    match cfg.dataset.encode.variant {
        EncodeVariant::Deterministic => {
            if max_diff > 1e-6 {
                return Err(Error::numeric(format!(
                    "deterministic encoding drifted across epochs: max diff {max_diff:e}"
                )));
            }
        }
        EncodeVariant::Stochastic => {
            if (differing as f64) < 0.99 * total as f64 {
                return Err(Error::numeric(format!(
                    "stochastic encoding too similar across epochs: {differing}/{total} differ"
                )));
            }
        }
    }
    Ok(())
}

/// One pretrain+finetune cycle per swept value, all sharing the base seed.
pub fn run_ablation_sweep(
    axis: SweepAxis,
    values: &[String],
    base: &ExperimentConfig,
    teacher: &Arc<DiffusionTeacher<f32>>,
    interpreter: Option<&Arc<TrainedInterpreter<f32>>>,
    data: &PipelineData,
) -> Result<SweepOutcome> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = base.clone();
        apply_axis(&mut cfg, axis, value)?;
        cfg.validate()?;
        if axis == SweepAxis::EncodeMode {
            assert_encode_contract(&cfg, teacher, data)?;
        }
        let reports = run_pipeline(
            &cfg,
            teacher,
            interpreter,
            data,
            &format!("sweep-{value}"),
        )?;
        rows.push(SweepRow {
            value: value.clone(),
            pretrain: reports.pretrain,
            finetune: reports.finetune,
        });
    }
    Ok(SweepOutcome { axis, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::store_digest;
    use crate::dataset::{Augmentation, CachePolicy, DatasetSpec};
    use crate::teacher::{EncodeMode, TeacherConfig};

    fn toy_teacher_config() -> TeacherConfig {
        TeacherConfig {
            base_channels: 8,
            channel_mult: [1, 1, 2, 2],
            num_res_blocks: 1,
            attn_strides: vec![],
            t_total: 40,
            beta_min: 1e-4,
            beta_max: 2e-2,
            lr: 1e-3,
            batch_size: 4,
            sample_steps: 3,
            seed: 0,
        }
    }

    fn toy_backbone_config() -> BackboneConfig {
        BackboneConfig {
            stem_channels: 8,
            stage_channels: [8, 8, 16, 16],
            blocks_per_stage: [1, 1, 1, 1],
            seed: 9,
        }
    }

    fn toy_regressor_config(teacher: &TeacherConfig) -> RegressorConfig {
        RegressorConfig {
            fpn_channels: 16,
            pool_scales: vec![1, 2],
            teacher_channels: teacher.tap_channels(),
            seed: 5,
        }
    }

    fn toy_run(epochs: usize) -> RunConfig {
        RunConfig {
            base_lr: 4e-3,
            weight_decay: 0.05,
            betas: (0.9, 0.95),
            warmup_epochs: 1,
            epochs,
            batch_size: 4,
            seed: 3,
        }
    }

    /// Deterministically encoded records, computed once and replayed.
    fn toy_records(n: usize) -> Vec<FeatureRecord> {
        let teacher = Arc::new(DiffusionTeacher::<f32>::build(&toy_teacher_config()).unwrap());
        let (images, _) = generate_shapes_dataset(n, 3, 64, 21).unwrap();
        let spec = DatasetSpec {
            mode: DataMode::Encoded,
            cache: CachePolicy::Online,
            encode: EncodeMode {
                variant: EncodeVariant::Deterministic,
                t_encode: 5,
                seed: 0,
            },
            augmentation: Augmentation::None,
        };
        iterate_encoded(teacher, Arc::new(images), spec, 0, 4)
            .unwrap()
            .map(|r| r.unwrap())
            .collect()
    }

    fn replay<'a>(records: &'a [FeatureRecord]) -> Box<StreamFactory<'a>> {
        Box::new(move |_| {
            let cloned: Vec<Result<FeatureRecord>> =
                records.iter().cloned().map(Ok).collect();
            Ok(Box::new(cloned.into_iter()))
        })
    }

    fn toy_distill() -> DistillConfig {
        DistillConfig::default()
    }

    #[test]
    fn pretrain_converges_and_is_deterministic() {
        let records = toy_records(8);
        let teacher_cfg = toy_teacher_config();
        let run = toy_run(20);
        let pretrain = || {
            pretrain_feature_distill::<f32>(
                &toy_backbone_config(),
                &toy_regressor_config(&teacher_cfg),
                &mut *replay(&records),
                records.len(),
                &toy_distill(),
                &run,
                "t",
            )
            .unwrap()
        };
        let a = pretrain();
        let losses = &a.report.epoch_losses;
        assert_eq!(losses.len(), 20);
        assert!(
            losses[19].total < 0.5 * losses[0].total,
            "feat loss must at least halve: first {} final {}",
            losses[0].total,
            losses[19].total
        );
        assert!(losses.iter().all(|e| e.ld == 0.0));
        let b = pretrain();
        assert_eq!(store_digest(&a.store), store_digest(&b.store), "same seed, same weights");
        assert_eq!(
            a.report.epoch_losses, b.report.epoch_losses,
            "same seed, same loss curve"
        );
    }

    #[test]
    fn mix_with_zero_label_weight_equals_feature_only() {
        let mut records = toy_records(8);
        for r in records.iter_mut() {
            let (h, w) = {
                let t = r.teacher_features.get(2).unwrap();
                (t.shape()[2], t.shape()[3])
            };
            r.soft_logits = Some(ArrayD::from_shape_fn(IxDyn(&[3, h, w]), |ix| {
                (ix[0] as f32) - (ix[1] % 2) as f32
            }));
        }
        let teacher_cfg = toy_teacher_config();
        let run = toy_run(4);
        let mut distill = toy_distill();
        distill.lambda_ld = 0.0;
        let feat = pretrain_feature_distill::<f32>(
            &toy_backbone_config(),
            &toy_regressor_config(&teacher_cfg),
            &mut *replay(&records),
            records.len(),
            &distill,
            &run,
            "feat",
        )
        .unwrap();
        let mix = pretrain_mix_distill::<f32>(
            &toy_backbone_config(),
            &toy_regressor_config(&teacher_cfg),
            3,
            &mut *replay(&records),
            records.len(),
            &distill,
            &run,
            "mix",
        )
        .unwrap();
        for (a, b) in feat.report.epoch_losses.iter().zip(&mix.report.epoch_losses) {
            assert!((a.total - b.total).abs() <= 1e-6, "{} vs {}", a.total, b.total);
        }
        assert_eq!(
            store_digest(&feat.store.subset("backbone")),
            store_digest(&mix.store.subset("backbone")),
            "dead label head must not disturb the backbone trajectory"
        );
    }

    #[test]
    fn mix_requires_soft_logits_and_ignores_labels() {
        let records = toy_records(4);
        let teacher_cfg = toy_teacher_config();
        let run = toy_run(2);
        let distill = {
            let mut d = toy_distill();
            d.lambda_ld = 1.0;
            d
        };
        let missing = pretrain_mix_distill::<f32>(
            &toy_backbone_config(),
            &toy_regressor_config(&teacher_cfg),
            3,
            &mut *replay(&records),
            records.len(),
            &distill,
            &run,
            "m",
        );
        assert!(
            matches!(missing, Err(Error::Config(_))),
            "records without soft_logits must be a configuration error"
        );

        // Labels riding along on the records must not influence training.
        let mut with_soft = records.clone();
        for r in with_soft.iter_mut() {
            let t = r.teacher_features.get(2).unwrap();
            let (h, w) = (t.shape()[2], t.shape()[3]);
            r.soft_logits =
                Some(ArrayD::from_shape_fn(IxDyn(&[3, h, w]), |ix| ix[0] as f32 * 0.3));
        }
        let mut with_labels = with_soft.clone();
        for r in with_labels.iter_mut() {
            r.label = Some(ArrayD::from_elem(IxDyn(&[64, 64]), 2u8));
        }
        let run_one = |recs: &[FeatureRecord]| {
            pretrain_mix_distill::<f32>(
                &toy_backbone_config(),
                &toy_regressor_config(&teacher_cfg),
                3,
                &mut *replay(recs),
                recs.len(),
                &distill,
                &run,
                "m",
            )
            .unwrap()
        };
        let a = run_one(&with_soft);
        let b = run_one(&with_labels);
        assert_eq!(
            store_digest(&a.store),
            store_digest(&b.store),
            "ground-truth labels must stay outside the training graph"
        );
        assert!(a.report.epoch_losses.iter().all(|e| e.ld > 0.0));
    }

    #[test]
    fn finetune_budget_symmetry_and_frozen_backbone() {
        let (images, masks) = generate_shapes_dataset(8, 3, 64, 33).unwrap();
        let train_i = images.slice_axis(Axis(0), ndarray::Slice::from(0..6)).to_owned().into_dyn();
        let train_m = masks.slice_axis(Axis(0), ndarray::Slice::from(0..6)).to_owned().into_dyn();
        let eval_i = images.slice_axis(Axis(0), ndarray::Slice::from(6..8)).to_owned().into_dyn();
        let eval_m = masks.slice_axis(Axis(0), ndarray::Slice::from(6..8)).to_owned().into_dyn();
        let bb = toy_backbone_config();
        let run = toy_run(2);
        let random_arm = finetune_segmentation::<f32>(
            None, &bb, &train_i, &train_m, &eval_i, &eval_m, 3, &toy_distill(), &run, false, "rand",
        )
        .unwrap();
        let miou = random_arm.report.final_metrics.miou.unwrap();
        assert!((0.0..=100.0).contains(&miou));
        assert!(random_arm.report.final_metrics.pixel_accuracy.unwrap() <= 100.0);

        // Frozen readout: backbone params and stats stay bit-identical.
        let frozen = finetune_segmentation::<f32>(
            None, &bb, &train_i, &train_m, &eval_i, &eval_m, 3, &toy_distill(), &run, true, "fr",
        )
        .unwrap();
        let mut fresh = ParamStore::<f32>::new();
        build_backbone(&mut fresh, "backbone", &bb).unwrap();
        assert_eq!(
            store_digest(&frozen.store.subset("backbone")),
            store_digest(&fresh.subset("backbone")),
            "freeze=true must leave the backbone untouched"
        );
        assert_ne!(
            store_digest(&random_arm.store.subset("backbone")),
            store_digest(&fresh.subset("backbone")),
            "full finetune must move the backbone"
        );
        // Both arms consume identical step budgets.
        assert_eq!(
            random_arm.report.epoch_losses.len(),
            frozen.report.epoch_losses.len()
        );

        let bad_masks = train_m.mapv(|v| v + 7);
        let mismatch = finetune_segmentation::<f32>(
            None, &bb, &train_i, &bad_masks, &eval_i, &eval_m, 3, &toy_distill(), &run, false, "x",
        );
        assert!(matches!(mismatch, Err(Error::Config(_))));
    }

    #[test]
    fn sweep_encode_mode_has_two_rows_with_mode_assertions() {
        let teacher = Arc::new(DiffusionTeacher::<f32>::build(&toy_teacher_config()).unwrap());
        let mut base = ExperimentConfig::default();
        base.teacher = toy_teacher_config();
        base.backbone = toy_backbone_config();
        base.regressor = toy_regressor_config(&base.teacher);
        base.distill.lambda_ld = 0.0;
        base.dataset.encode.t_encode = 5;
        base.dataset.augmentation = Augmentation::None;
        base.data = DataConfig {
            n_unlabeled: 4,
            n_labeled: 4,
            n_eval: 2,
            classes: 3,
            resolution: 64,
            seed: 21,
        };
        base.run = toy_run(2);
        let data = make_pipeline_data(&base.data).unwrap();
        let values = vec!["deterministic".to_string(), "stochastic".to_string()];
        let out =
            run_ablation_sweep(SweepAxis::EncodeMode, &values, &base, &teacher, None, &data)
                .unwrap();
        assert_eq!(out.rows.len(), 2);
        assert!(out.rows.iter().all(|r| r.finetune.final_metrics.miou.is_some()));
        let table = out.markdown_table();
        assert!(table.contains("deterministic") && table.contains("stochastic"));
    }
}
