//! Residual student backbone exposing a stride-4..32 feature pyramid.
//!
//! Layout: a stride-2 stem conv plus a 2x2 max pool bring the input to
//! stride 4, where the first stage runs without further downsampling; the
//! remaining three stages each start with a stride-2 block. Stage outputs
//! are the pyramid levels 2..5.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Forward, ParamStore};
use crate::pyramid::FeaturePyramid;
use crate::tensor::{conv, ops, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stem_channels: 32,
            stage_channels: [32, 64, 128, 256],
            blocks_per_stage: [2, 2, 2, 2],
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 {
            return Err(Error::config("stem_channels must be positive"));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("stage_channels must all be positive"));
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(Error::config("blocks_per_stage must all be positive"));
        }
        Ok(())
    }
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Self {
        let conv1 =
            Conv2d::new(store, rng, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, 1, false);
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), out_ch);
        let conv2 =
            Conv2d::new(store, rng, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, 1, false);
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), out_ch);
        let shortcut = if stride != 1 || in_ch != out_ch {
            let c = Conv2d::new(
                store,
                rng,
                &format!("{name}.short.conv"),
                in_ch,
                out_ch,
                1,
                stride,
                0,
                1,
                false,
            );
            let bn = BatchNorm2d::new(store, &format!("{name}.short.bn"), out_ch);
            Some((c, bn))
        } else {
            None
        };
        BasicBlock { conv1, bn1, conv2, bn2, shortcut }
    }

    fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Var {
        let h = self.conv1.forward(f, x);
        let h = self.bn1.forward(f, h);
        let h = ops::relu(f.tape, h);
        let h = self.conv2.forward(f, h);
        let h = self.bn2.forward(f, h);
        let identity = match &self.shortcut {
            Some((c, bn)) => {
                let s = c.forward(f, x);
                bn.forward(f, s)
            }
            None => x,
        };
        ops::relu(f.tape, ops::add(f.tape, h, identity))
    }
}

pub struct Backbone {
    pub config: BackboneConfig,
    prefix: String,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
}

/// Builds the backbone into `store` under `prefix`, initialized from a
/// dedicated RNG seeded by `config.seed` so equal configs give bit-equal
/// parameters regardless of what else shares the store.
pub fn build_backbone<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    config: &BackboneConfig,
) -> Result<Backbone> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let stem = Conv2d::new(
        store,
        &mut rng,
        &format!("{prefix}.stem.conv"),
        3,
        config.stem_channels,
        3,
        2,
        1,
        1,
        false,
    );
    let stem_bn = BatchNorm2d::new(store, &format!("{prefix}.stem.bn"), config.stem_channels);
    let mut stages = Vec::with_capacity(4);
    let mut in_ch = config.stem_channels;
    for (stage_idx, (&out_ch, &blocks)) in config
        .stage_channels
        .iter()
        .zip(config.blocks_per_stage.iter())
        .enumerate()
    {
        let mut stage = Vec::with_capacity(blocks);
        for block_idx in 0..blocks {
            // Stage 0 sits at stride 4 already (stem + pool); later stages
            // downsample in their first block.
            let stride = if stage_idx > 0 && block_idx == 0 { 2 } else { 1 };
            let name = format!("{prefix}.stage{}.block{}", stage_idx, block_idx);
            stage.push(BasicBlock::new(store, &mut rng, &name, in_ch, out_ch, stride));
            in_ch = out_ch;
        }
        stages.push(stage);
    }
    Ok(Backbone { config: config.clone(), prefix: prefix.to_string(), stem, stem_bn, stages })
}

impl Backbone {
    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Runs the backbone and returns pyramid levels {2,3,4,5}.
    pub fn forward_features<S: Scalar>(
        &self,
        f: &mut Forward<'_, S>,
        images: Var,
    ) -> Result<FeaturePyramid<Var>> {
        let shape = f.tape.shape(images);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape(format!("expected [B,3,H,W] images, got {shape:?}")));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} not divisible by 32"
            )));
        }
        let x = self.stem.forward(f, images);
        let x = self.stem_bn.forward(f, x);
        let x = ops::relu(f.tape, x);
        let mut x = conv::max_pool2x2(f.tape, x);
        let mut levels = Vec::with_capacity(4);
        for (stage_idx, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(f, x);
            }
            levels.push((2 + stage_idx as u8, x));
        }
        FeaturePyramid::from_vars(f.tape, levels, (h, w))
    }
}
