//! Feature regressor: projects the student pyramid into teacher feature
//! space via a pyramid pooling module on the deepest level, an FPN-style
//! top-down pathway with lateral connections, and per-level 1x1 output
//! projections. Discarded after pretraining.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Forward, ParamStore};
use crate::pyramid::FeaturePyramid;
use crate::teacher::TeacherConfig;
use crate::tensor::{conv, ops, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RegressorConfig {
    pub fpn_channels: usize,
    pub pool_scales: Vec<usize>,
    /// Output channels per pyramid level, matching the teacher's taps.
    pub teacher_channels: BTreeMap<u8, usize>,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            fpn_channels: 256,
            pool_scales: vec![1, 2, 3, 6],
            teacher_channels: TeacherConfig::default().tap_channels(),
            seed: 0,
        }
    }
}

impl RegressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fpn_channels == 0 {
            return Err(Error::config("fpn_channels must be positive"));
        }
        if self.pool_scales.is_empty() {
            return Err(Error::config("pool_scales must be non-empty"));
        }
        if !self.pool_scales.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("pool_scales must be strictly increasing"));
        }
        if self.pool_scales[0] == 0 {
            return Err(Error::config("pool_scales must be positive"));
        }
        for l in 2u8..=5 {
            match self.teacher_channels.get(&l) {
                Some(&c) if c > 0 => {}
                _ => {
                    return Err(Error::config(format!(
                        "teacher_channels must cover level {l}"
                    )))
                }
            }
        }
        Ok(())
    }
}

struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Self {
        let pad = kernel / 2;
        let conv = Conv2d::new(store, rng, &format!("{name}.conv"), in_ch, out_ch, kernel, 1, pad, 1, false);
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), out_ch);
        ConvBnRelu { conv, bn }
    }

    fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Var {
        let h = self.conv.forward(f, x);
        let h = self.bn.forward(f, h);
        ops::relu(f.tape, h)
    }
}

pub struct Regressor {
    pub config: RegressorConfig,
    ppm_branches: Vec<ConvBnRelu>,
    ppm_fuse: ConvBnRelu,
    laterals: Vec<ConvBnRelu>,
    fuses: Vec<ConvBnRelu>,
    projections: Vec<Conv2d>,
}

/// Builds the regressor under `prefix` for a student with the given
/// per-level channel counts (levels 2..5 ascending).
pub fn build_regressor<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    config: &RegressorConfig,
    student_channels: [usize; 4],
) -> Result<Regressor> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let fpn = config.fpn_channels;
    let branch_ch = (fpn / config.pool_scales.len()).max(1);
    let c5 = student_channels[3];
    let mut ppm_branches = Vec::with_capacity(config.pool_scales.len());
    for (i, _) in config.pool_scales.iter().enumerate() {
        ppm_branches.push(ConvBnRelu::new(
            store,
            &mut rng,
            &format!("{prefix}.ppm.branch{i}"),
            c5,
            branch_ch,
            1,
        ));
    }
    let ppm_fuse = ConvBnRelu::new(
        store,
        &mut rng,
        &format!("{prefix}.ppm.fuse"),
        c5 + branch_ch * config.pool_scales.len(),
        fpn,
        3,
    );
    // Laterals for levels 2..4; level 5 enters through the PPM.
    let mut laterals = Vec::with_capacity(3);
    for (i, &ch) in student_channels[..3].iter().enumerate() {
        laterals.push(ConvBnRelu::new(
            store,
            &mut rng,
            &format!("{prefix}.lateral{}", i + 2),
            ch,
            fpn,
            1,
        ));
    }
    let mut fuses = Vec::with_capacity(4);
    let mut projections = Vec::with_capacity(4);
    for l in 2u8..=5 {
        fuses.push(ConvBnRelu::new(store, &mut rng, &format!("{prefix}.fuse{l}"), fpn, fpn, 3));
        projections.push(Conv2d::new(
            store,
            &mut rng,
            &format!("{prefix}.proj{l}"),
            fpn,
            config.teacher_channels[&l],
            1,
            1,
            0,
            1,
            true,
        ));
    }
    Ok(Regressor { config: config.clone(), ppm_branches, ppm_fuse, laterals, fuses, projections })
}

impl Regressor {
    /// Maps a student pyramid onto teacher feature space, preserving
    /// spatial dims per level.
    pub fn forward<S: Scalar>(
        &self,
        f: &mut Forward<'_, S>,
        student: &FeaturePyramid<Var>,
    ) -> Result<FeaturePyramid<Var>> {
        if student.level_indices() != vec![2, 3, 4, 5] {
            return Err(Error::config(format!(
                "regressor needs levels 2..5, got {:?}",
                student.level_indices()
            )));
        }
        let x5 = *student.get(5).unwrap();
        let s5 = f.tape.shape(x5);
        let (h5, w5) = (s5[2], s5[3]);
        if let Some(&bad) = self.config.pool_scales.iter().find(|&&s| s > h5.min(w5)) {
            return Err(Error::config(format!(
                "pool scale {bad} exceeds deepest level spatial {h5}x{w5}"
            )));
        }
        let mut cat = vec![x5];
        for (branch, &scale) in self.ppm_branches.iter().zip(&self.config.pool_scales) {
            let pooled = conv::adaptive_avg_pool(f.tape, x5, scale, scale);
            let reduced = branch.forward(f, pooled);
            cat.push(conv::bilinear_resize(f.tape, reduced, h5, w5));
        }
        let joined = ops::concat(f.tape, &cat, 1);
        let mut top = self.ppm_fuse.forward(f, joined);

        // Top-down pathway, deepest first.
        let mut merged = vec![(5u8, top)];
        for l in [4u8, 3, 2] {
            let lat = self.laterals[(l - 2) as usize].forward(f, *student.get(l).unwrap());
            let up = conv::upsample_nearest2x(f.tape, top);
            top = ops::add(f.tape, lat, up);
            merged.push((l, top));
        }
        merged.reverse();

        let mut out_levels = Vec::with_capacity(4);
        for (l, feat) in merged {
            let fused = self.fuses[(l - 2) as usize].forward(f, feat);
            let proj = self.projections[(l - 2) as usize].forward(f, fused);
            out_levels.push((l, proj));
        }
        FeaturePyramid::from_vars(f.tape, out_levels, student.input_resolution())
    }
}

/// Exact regressor parameter count for a given student width layout.
pub fn count_parameters(config: &RegressorConfig, student_channels: [usize; 4]) -> Result<usize> {
    let mut store = ParamStore::<f32>::new();
    build_regressor(&mut store, "regressor", config, student_channels)?;
    Ok(store.param_count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use ndarray::ArrayD;
    use rand::Rng;

    fn student_pyramid(
        b: usize,
        chans: [usize; 4],
        res: usize,
        seed: u64,
    ) -> FeaturePyramid<ArrayD<f32>> {
        let mut rng = crate::seeding::keyed_rng(&[seed]);
        let levels = (0..4)
            .map(|i| {
                let s = res >> (2 + i);
                let arr = ArrayD::from_shape_fn(
                    ndarray::IxDyn(&[b, chans[i], s, s]),
                    |_| rng.gen_range(-1.0f32..1.0),
                );
                (2 + i as u8, arr)
            })
            .collect();
        FeaturePyramid::new(levels, (res, res)).unwrap()
    }

    fn run(
        config: &RegressorConfig,
        student: &FeaturePyramid<ArrayD<f32>>,
        chans: [usize; 4],
    ) -> Result<FeaturePyramid<ArrayD<f32>>> {
        let mut store = ParamStore::<f32>::new();
        let reg = build_regressor(&mut store, "regressor", config, chans)?;
        let tape = Tape::<f32>::new();
        let mut rng = crate::seeding::keyed_rng(&[0]);
        let mut f = Forward::new(&tape, &mut store, &mut rng, false);
        let sp = student.to_tape(&tape, false);
        let out = reg.forward(&mut f, &sp)?;
        Ok(out.to_arrays(&tape))
    }

    #[test]
    fn output_matches_teacher_channel_contract() {
        let chans = [32, 64, 128, 256];
        let mut config = RegressorConfig::default();
        // 64^2 leaves level 5 at 2x2, so only scales up to 2 can pool.
        config.pool_scales = vec![1, 2];
        config.teacher_channels =
            [(2u8, 64), (3u8, 128), (4u8, 256), (5u8, 256)].into_iter().collect();
        let student = student_pyramid(2, chans, 64, 1);
        let out = run(&config, &student, chans).unwrap();
        let expect = [(2u8, 64, 16), (3, 128, 8), (4, 256, 4), (5, 256, 2)];
        for (l, c, s) in expect {
            assert_eq!(out.get(l).unwrap().shape(), &[2, c, s, s]);
        }
    }

    #[test]
    fn pool_scale_must_fit_deepest_level() {
        let chans = [8, 8, 8, 8];
        let config = RegressorConfig {
            fpn_channels: 8,
            pool_scales: vec![1, 2, 3, 6],
            teacher_channels: (2u8..=5).map(|l| (l, 8)).collect(),
            seed: 0,
        };
        // 64^2 input: level 5 is 2x2, so scales 3 and 6 cannot pool.
        let student = student_pyramid(1, chans, 64, 2);
        let err = run(&config, &student, chans).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let ok = RegressorConfig { pool_scales: vec![1, 2], ..config };
        assert!(run(&ok, &student, chans).is_ok());
    }

    #[test]
    fn information_flows_strictly_top_down() {
        let chans = [8, 8, 16, 16];
        let config = RegressorConfig {
            fpn_channels: 16,
            pool_scales: vec![1, 2],
            teacher_channels: (2u8..=5).map(|l| (l, 8)).collect(),
            seed: 3,
        };
        let base = student_pyramid(1, chans, 64, 4);
        let out_base = run(&config, &base, chans).unwrap();

        let perturbed = base.get(5).unwrap().mapv(|v| v + 1.0);
        let levels5: Vec<(u8, ArrayD<f32>)> = base
            .iter()
            .map(|(l, t)| (l, if l == 5 { perturbed.clone() } else { t.clone() }))
            .collect();
        let bumped5 = FeaturePyramid::new(levels5, (64, 64)).unwrap();
        let out5 = run(&config, &bumped5, chans).unwrap();
        for l in 2u8..=5 {
            let diff = max_diff(out_base.get(l).unwrap(), out5.get(l).unwrap());
            assert!(diff > 0.0, "level-5 perturbation must reach output level {l}");
        }

        let perturbed2 = base.get(2).unwrap().mapv(|v| v + 1.0);
        let levels2: Vec<(u8, ArrayD<f32>)> = base
            .iter()
            .map(|(l, t)| (l, if l == 2 { perturbed2.clone() } else { t.clone() }))
            .collect();
        let bumped2 = FeaturePyramid::new(levels2, (64, 64)).unwrap();
        let out2 = run(&config, &bumped2, chans).unwrap();
        for l in 3u8..=5 {
            let diff = max_diff(out_base.get(l).unwrap(), out2.get(l).unwrap());
            assert_eq!(diff, 0.0, "level-2 perturbation leaked upward to level {l}");
        }
        assert!(max_diff(out_base.get(2).unwrap(), out2.get(2).unwrap()) > 0.0);
    }

    fn max_diff(a: &ArrayD<f32>, b: &ArrayD<f32>) -> f32 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn parameter_count_properties() {
        let chans = [32, 64, 128, 256];
        let config = RegressorConfig::default();
        let a = count_parameters(&config, chans).unwrap();
        let b = count_parameters(&config, chans).unwrap();
        assert_eq!(a, b);
        let wider = RegressorConfig { fpn_channels: 512, ..config.clone() };
        assert!(count_parameters(&wider, chans).unwrap() > a);
        // Regression pin for the default desk configuration.
        assert_eq!(a, 3_765_120);
    }

    #[test]
    fn default_config_is_paper_faithful() {
        let config = RegressorConfig::default();
        assert_eq!(config.fpn_channels, 256);
        assert_eq!(config.pool_scales, vec![1, 2, 3, 6]);
        assert!(config.validate().is_ok());
        let missing = RegressorConfig {
            teacher_channels: [(2u8, 8)].into_iter().collect(),
            ..config
        };
        assert!(missing.validate().is_err());
    }
}
