//! Feature interpreter: a fusion head over frozen teacher features that
//! produces per-pixel class logits at stride 4. Trained on the labeled
//! fraction only; its eval-mode outputs become the soft labels for mixed
//! distillation.

use crate::error::{Error, Result};
use crate::losses::{interpreter_loss, DistillConfig};
use crate::metrics::{argmax_classes, downsample_mask, ConfusionMatrix};
use crate::nn::{Conv2d, Dropout, Forward, GroupNorm, ParamStore};
use crate::optim::{lr_at_step, AdamW};
use crate::pyramid::FeaturePyramid;
use crate::seeding::keyed_rng;
use crate::teacher::{DiffusionTeacher, EncodeMode, EncodeVariant, T_ENCODE_LABEL_EFFICIENT};
use crate::tensor::{conv, ops, Scalar, Tape, Var};
use ndarray::{ArrayD, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct InterpreterConfig {
    pub fuse_channels: usize,
    pub num_classes: usize,
    pub groups: usize,
    pub dropout_rate: f64,
    /// Encode step for interpreter training (label-efficient recipe).
    pub t_encode: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for InterpreterConfig {
    fn default() -> Self {
        InterpreterConfig {
            fuse_channels: 256,
            num_classes: 5,
            groups: 32,
            dropout_rate: 0.1,
            t_encode: T_ENCODE_LABEL_EFFICIENT,
            lr: 2e-3,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl InterpreterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fuse_channels == 0 || self.groups == 0 || self.fuse_channels % self.groups != 0 {
            return Err(Error::config("fuse_channels must be a positive multiple of groups"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate must be in [0,1)"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Depthwise 3x3 + pointwise 1x1, then group norm and swish.
struct FuseBlock {
    depthwise: Conv2d,
    pointwise: Conv2d,
    gn: GroupNorm,
}

impl FuseBlock {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        groups: usize,
    ) -> Self {
        let depthwise =
            Conv2d::new(store, rng, &format!("{name}.dw"), in_ch, in_ch, 3, 1, 1, in_ch, false);
        let pointwise =
            Conv2d::new(store, rng, &format!("{name}.pw"), in_ch, out_ch, 1, 1, 0, 1, false);
        let gn = GroupNorm::new(store, &format!("{name}.gn"), out_ch, groups);
        FuseBlock { depthwise, pointwise, gn }
    }

    fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Var {
        let h = self.depthwise.forward(f, x);
        let h = self.pointwise.forward(f, h);
        let h = self.gn.forward(f, h);
        ops::silu(f.tape, h)
    }
}

pub struct Interpreter {
    pub config: InterpreterConfig,
    laterals: Vec<Conv2d>,
    fuses: Vec<FuseBlock>,
    dropout: Dropout,
    logit_conv: Conv2d,
}

/// Builds the interpreter under `prefix` for the given teacher tap widths
/// (levels 2..5 ascending).
pub fn build_interpreter<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    config: &InterpreterConfig,
    teacher_channels: [usize; 4],
) -> Result<Interpreter> {
    config.validate()?;
    let mut rng = keyed_rng(&[config.seed, 0x1f]);
    let fc = config.fuse_channels;
    let mut laterals = Vec::with_capacity(4);
    for (i, &ch) in teacher_channels.iter().enumerate() {
        laterals.push(Conv2d::new(
            store,
            &mut rng,
            &format!("{prefix}.lateral{}", i + 2),
            ch,
            fc,
            1,
            1,
            0,
            1,
            true,
        ));
    }
    // One fusion per merge with the next-shallower level: 4, 3, 2.
    let mut fuses = Vec::with_capacity(3);
    for l in [4u8, 3, 2] {
        fuses.push(FuseBlock::new(
            store,
            &mut rng,
            &format!("{prefix}.fuse{l}"),
            2 * fc,
            fc,
            config.groups,
        ));
    }
    let logit_conv = Conv2d::new(
        store,
        &mut rng,
        &format!("{prefix}.logits"),
        fc,
        config.num_classes,
        1,
        1,
        0,
        1,
        true,
    );
    Ok(Interpreter {
        config: config.clone(),
        laterals,
        fuses,
        dropout: Dropout { p: config.dropout_rate },
        logit_conv,
    })
}

impl Interpreter {
    /// Deepest-to-shallowest fusion over teacher taps; logits at stride 4.
    pub fn forward<S: Scalar>(
        &self,
        f: &mut Forward<'_, S>,
        teacher_pyramid: &FeaturePyramid<Var>,
    ) -> Result<Var> {
        if teacher_pyramid.level_indices() != vec![2, 3, 4, 5] {
            return Err(Error::shape(format!(
                "interpreter needs levels 2..5, got {:?}",
                teacher_pyramid.level_indices()
            )));
        }
        let mut x = self.laterals[3].forward(f, *teacher_pyramid.get(5).unwrap());
        for (i, l) in [4u8, 3, 2].into_iter().enumerate() {
            let feat = *teacher_pyramid.get(l).unwrap();
            let target = f.tape.shape(feat);
            let up = conv::bilinear_resize(f.tape, x, target[2], target[3]);
            let lat = self.laterals[(l - 2) as usize].forward(f, feat);
            let cat = ops::concat(f.tape, &[up, lat], 1);
            x = self.fuses[i].forward(f, cat);
        }
        let x = self.dropout.forward(f, x);
        Ok(self.logit_conv.forward(f, x))
    }
}

/// Soft labels from a trained interpreter: eval-mode logits, detached.
pub fn emit_soft_labels<S: Scalar>(
    interpreter: &Interpreter,
    store: &ParamStore<S>,
    teacher_pyramid: &FeaturePyramid<ArrayD<S>>,
) -> Result<ArrayD<S>> {
    let tape = Tape::<S>::new();
    let mut store = store.clone();
    let mut rng = keyed_rng(&[0]);
    let mut f = Forward::new(&tape, &mut store, &mut rng, false);
    let pyr = teacher_pyramid.to_tape(&tape, false);
    let logits = interpreter.forward(&mut f, &pyr)?;
    Ok(tape.value(logits).as_ref().clone())
}

pub struct TrainedInterpreter<S: Scalar> {
    pub interpreter: Interpreter,
    pub store: ParamStore<S>,
    /// Train-set mIoU before training and after each epoch.
    pub miou_curve: Vec<f64>,
}

impl<S: Scalar> TrainedInterpreter<S> {
    /// Teacher channel widths per level, read off the lateral weights.
    fn teacher_channels(&self) -> [usize; 4] {
        let mut out = [0usize; 4];
        for (i, slot) in out.iter_mut().enumerate() {
            let w = &self.store.get(&format!("interpreter.lateral{}.weight", i + 2)).value;
            *slot = w.shape()[1];
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.interpreter.config,
            "teacher_channels": self.teacher_channels(),
            "miou_curve": self.miou_curve,
        });
        crate::checkpoint::save_store(path, &meta, &self.store)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (meta, loaded) = crate::checkpoint::load_store::<S>(path)?;
        let bad = |e: String| Error::config(format!("interpreter checkpoint meta: {e}"));
        let config: InterpreterConfig =
            serde_json::from_value(meta["config"].clone()).map_err(|e| bad(e.to_string()))?;
        let channels: [usize; 4] = serde_json::from_value(meta["teacher_channels"].clone())
            .map_err(|e| bad(e.to_string()))?;
        let miou_curve: Vec<f64> = serde_json::from_value(meta["miou_curve"].clone())
            .map_err(|e| bad(e.to_string()))?;
        let mut store = ParamStore::<S>::new();
        let interpreter = build_interpreter(&mut store, "interpreter", &config, channels)?;
        store.adopt(&loaded, "interpreter")?;
        Ok(TrainedInterpreter { interpreter, store, miou_curve })
    }
}

/// Trains the interpreter on encoded features of the labeled images.
///
/// Images are encoded once, deterministically, at `config.t_encode`; the
/// teacher is only read. Masks are compared at stride 4.
pub fn train_interpreter<S: Scalar>(
    teacher: &DiffusionTeacher<S>,
    images: &ArrayD<S>,
    masks: &ArrayD<u8>,
    config: &InterpreterConfig,
    distill: &DistillConfig,
    epochs: usize,
    seed: u64,
) -> Result<TrainedInterpreter<S>> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::config("interpreter training needs labeled samples"));
    }
    if masks.shape()[0] != n {
        return Err(Error::shape("one mask per image required"));
    }
    let mode = EncodeMode {
        variant: EncodeVariant::Deterministic,
        t_encode: config.t_encode,
        seed: 0,
    };
    // Per-sample pyramids, encoded once up front.
    let mut encoded: Vec<FeaturePyramid<ArrayD<S>>> = Vec::with_capacity(n);
    let bs = config.batch_size;
    let mut idx = 0;
    while idx < n {
        let hi = (idx + bs).min(n);
        let chunk = images.slice_axis(Axis(0), ndarray::Slice::from(idx..hi)).to_owned();
        let ids: Vec<u64> = (idx..hi).map(|i| i as u64).collect();
        let pyr = teacher.encode_features(&chunk.into_dyn(), &mode, &ids, 0)?;
        for row in 0..ids.len() {
            encoded.push(select_sample(&pyr, row)?);
        }
        idx = hi;
    }
    let small_masks = downsample_mask(masks, 4);

    let mut cfg = config.clone();
    cfg.seed = seed;
    let taps = teacher.config.tap_channels();
    let tap_arr = [taps[&2], taps[&3], taps[&4], taps[&5]];
    let mut store = ParamStore::<S>::new();
    let interp = build_interpreter(&mut store, "interpreter", &cfg, tap_arr)?;

    let mut curve = Vec::with_capacity(epochs + 1);
    curve.push(train_miou(&interp, &store, &encoded, &small_masks, config)?);
    let mut opt = AdamW::new((0.9, 0.95), 1e-8, 0.05);
    let steps_per_epoch = n.div_ceil(bs);
    let total_steps = (steps_per_epoch * epochs).max(1);
    let warmup = (total_steps / 20).min(total_steps.saturating_sub(1));
    let mut step = 0usize;
    for epoch in 0..epochs {
        let order = crate::seeding::shuffled_indices(
            &mut keyed_rng(&[seed, 10, epoch as u64]),
            n,
        );
        for batch in order.chunks(bs) {
            let (pyr, mask) = collate(&encoded, &small_masks, batch)?;
            let tape = Tape::<S>::new();
            let grads_list;
            {
                let mut drop_rng = keyed_rng(&[seed, 11, step as u64]);
                let mut f = Forward::new(&tape, &mut store, &mut drop_rng, true);
                let pyr_vars = pyr.to_tape(&tape, false);
                let logits = interp.forward(&mut f, &pyr_vars)?;
                let loss = interpreter_loss(&tape, logits, &mask, distill)?;
                let lv = tape.scalar(loss).to_f64();
                if !lv.is_finite() {
                    return Err(Error::numeric(format!(
                        "interpreter loss non-finite at step {step}"
                    )));
                }
                let mut grads = tape.backward(loss);
                grads_list = f
                    .bound_leaves()
                    .into_iter()
                    .map(|(name, var)| (name, grads.take(var).expect("leaf grad")))
                    .collect::<Vec<_>>();
            }
            let lr = lr_at_step(config.lr, step, total_steps, warmup);
            opt.step(&mut store, &grads_list, lr);
            step += 1;
        }
        curve.push(train_miou(&interp, &store, &encoded, &small_masks, config)?);
    }
    Ok(TrainedInterpreter { interpreter: interp, store, miou_curve: curve })
}

/// Single-record view of one row of a batched pyramid.
pub fn select_sample<S: Scalar>(
    pyr: &FeaturePyramid<ArrayD<S>>,
    row: usize,
) -> Result<FeaturePyramid<ArrayD<S>>> {
    let levels: Vec<(u8, ArrayD<S>)> = pyr
        .iter()
        .map(|(l, t)| {
            let one = t
                .index_axis(Axis(0), row)
                .insert_axis(Axis(0))
                .to_owned()
                .into_dyn();
            (l, one)
        })
        .collect();
    FeaturePyramid::new(levels, pyr.input_resolution())
}

/// Stacks single-sample pyramids and stride-4 masks for the given rows.
fn collate<S: Scalar>(
    encoded: &[FeaturePyramid<ArrayD<S>>],
    small_masks: &ArrayD<u8>,
    rows: &[usize],
) -> Result<(FeaturePyramid<ArrayD<S>>, ArrayD<u8>)> {
    let first = &encoded[rows[0]];
    let mut levels: Vec<(u8, ArrayD<S>)> = Vec::with_capacity(first.len());
    for (l, t0) in first.iter() {
        let mut shape = t0.shape().to_vec();
        shape[0] = rows.len();
        let mut out = ArrayD::<S>::zeros(ndarray::IxDyn(&shape));
        for (slot, &r) in rows.iter().enumerate() {
            let src = encoded[r].get(l).unwrap();
            out.index_axis_mut(Axis(0), slot)
                .assign(&src.index_axis(Axis(0), 0));
        }
        levels.push((l, out));
    }
    let mut mshape = small_masks.shape().to_vec();
    mshape[0] = rows.len();
    let mut mask = ArrayD::<u8>::zeros(ndarray::IxDyn(&mshape));
    for (slot, &r) in rows.iter().enumerate() {
        mask.index_axis_mut(Axis(0), slot)
            .assign(&small_masks.index_axis(Axis(0), r));
    }
    Ok((FeaturePyramid::new(levels, first.input_resolution())?, mask))
}

fn train_miou<S: Scalar>(
    interp: &Interpreter,
    store: &ParamStore<S>,
    encoded: &[FeaturePyramid<ArrayD<S>>],
    small_masks: &ArrayD<u8>,
    config: &InterpreterConfig,
) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(config.num_classes);
    let rows: Vec<usize> = (0..encoded.len()).collect();
    for batch in rows.chunks(config.batch_size) {
        let (pyr, mask) = collate(encoded, small_masks, batch)?;
        let logits = emit_soft_labels(interp, store, &pyr)?;
        cm.update(&argmax_classes(&logits), &mask)?;
    }
    Ok(cm.miou())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::standard_normal;
    use crate::teacher::TeacherConfig;
    use ndarray::IxDyn;

    fn toy_teacher() -> DiffusionTeacher<f32> {
        let cfg = TeacherConfig {
            base_channels: 8,
            channel_mult: [1, 1, 2, 2],
            num_res_blocks: 1,
            attn_strides: vec![],
            t_total: 50,
            beta_min: 1e-4,
            beta_max: 2e-2,
            lr: 1e-3,
            batch_size: 4,
            sample_steps: 5,
            seed: 0,
        };
        DiffusionTeacher::build(&cfg).unwrap()
    }

    fn toy_interp_config() -> InterpreterConfig {
        InterpreterConfig {
            fuse_channels: 16,
            num_classes: 3,
            groups: 4,
            dropout_rate: 0.1,
            t_encode: 5,
            lr: 5e-3,
            batch_size: 4,
            seed: 0,
        }
    }

    #[test]
    fn config_validation() {
        let good = InterpreterConfig::default();
        assert!(good.validate().is_ok());
        assert_eq!(good.fuse_channels, 256);
        assert_eq!(good.groups, 32);
        assert!((good.dropout_rate - 0.1).abs() < 1e-12);
        assert_eq!(good.t_encode, 50);
        let bad = InterpreterConfig { fuse_channels: 250, ..good.clone() };
        assert!(bad.validate().is_err());
        let bad = InterpreterConfig { dropout_rate: 1.0, ..good };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn forward_emits_stride4_logits() {
        let teacher = toy_teacher();
        let x = standard_normal::<f32>(&mut keyed_rng(&[1]), &[2, 3, 64, 64]);
        let (_, pyr) = teacher.denoise_step_features(&x, 3).unwrap();
        let cfg = toy_interp_config();
        let mut store = ParamStore::<f32>::new();
        let taps = teacher.config.tap_channels();
        let interp =
            build_interpreter(&mut store, "interpreter", &cfg, [taps[&2], taps[&3], taps[&4], taps[&5]])
                .unwrap();
        let logits = emit_soft_labels(&interp, &store, &pyr).unwrap();
        assert_eq!(logits.shape(), &[2, 3, 16, 16]);
        let again = emit_soft_labels(&interp, &store, &pyr).unwrap();
        assert_eq!(logits, again, "eval forward must be pure");
    }

    #[test]
    fn dropout_only_active_in_training_mode() {
        let teacher = toy_teacher();
        let x = standard_normal::<f32>(&mut keyed_rng(&[2]), &[1, 3, 64, 64]);
        let (_, pyr) = teacher.denoise_step_features(&x, 3).unwrap();
        let cfg = InterpreterConfig { dropout_rate: 0.5, ..toy_interp_config() };
        let mut store = ParamStore::<f32>::new();
        let taps = teacher.config.tap_channels();
        let interp =
            build_interpreter(&mut store, "interpreter", &cfg, [taps[&2], taps[&3], taps[&4], taps[&5]])
                .unwrap();
        let train_logits = |salt: u64, store: &mut ParamStore<f32>| {
            let tape = Tape::<f32>::new();
            let mut rng = keyed_rng(&[salt]);
            let mut f = Forward::new(&tape, store, &mut rng, true);
            let pv = pyr.to_tape(&tape, false);
            let logits = interp.forward(&mut f, &pv).unwrap();
            tape.value(logits).as_ref().clone()
        };
        let a = train_logits(1, &mut store);
        let b = train_logits(2, &mut store);
        assert_ne!(a, b, "train-mode dropout should vary with the RNG stream");
    }

    #[test]
    fn training_improves_and_freezes_teacher() {
        let teacher = toy_teacher();
        // Synthetic "images" whose class structure is visible in pixels:
        // three vertical bands, band index = class.
        let n = 8;
        let mut images = ArrayD::<f32>::zeros(IxDyn(&[n, 3, 64, 64]));
        let mut masks = ArrayD::<u8>::zeros(IxDyn(&[n, 64, 64]));
        let mut rng = keyed_rng(&[33]);
        use rand::Rng;
        for i in 0..n {
            let shift: usize = rng.gen_range(0..3);
            for h in 0..64 {
                for w in 0..64 {
                    let band = (((w / 22) + shift) % 3) as u8;
                    masks[[i, h, w]] = band;
                    for c in 0..3 {
                        let v = if band as usize == c { 0.8 } else { -0.8 };
                        images[[i, c, h, w]] = v;
                    }
                }
            }
        }
        let digest_before = crate::checkpoint::store_digest(&teacher.store);
        let trained = train_interpreter(
            &teacher,
            &images,
            &masks,
            &toy_interp_config(),
            &DistillConfig::default(),
            3,
            9,
        )
        .unwrap();
        let digest_after = crate::checkpoint::store_digest(&teacher.store);
        assert_eq!(digest_before, digest_after, "teacher must stay frozen");
        let first = trained.miou_curve[0];
        let last = *trained.miou_curve.last().unwrap();
        assert!(last > first, "mIoU should improve: {:?}", trained.miou_curve);
        let rerun = train_interpreter(
            &teacher,
            &images,
            &masks,
            &toy_interp_config(),
            &DistillConfig::default(),
            3,
            9,
        )
        .unwrap();
        assert_eq!(trained.miou_curve, rerun.miou_curve, "training must be deterministic");
        for ((n1, p1), (n2, p2)) in trained.store.iter().zip(rerun.store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(p1.value, p2.value);
        }
        let empty_imgs = ArrayD::<f32>::zeros(IxDyn(&[0, 3, 64, 64]));
        let empty_masks = ArrayD::<u8>::zeros(IxDyn(&[0, 64, 64]));
        assert!(train_interpreter(
            &teacher,
            &empty_imgs,
            &empty_masks,
            &toy_interp_config(),
            &DistillConfig::default(),
            1,
            0
        )
        .is_err());
    }
}
