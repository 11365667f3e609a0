//! Distillation and segmentation objectives.
//!
//! Each loss is registered on the tape as a single fused node with a
//! hand-derived backward pass. Teacher-side inputs (the `g` pyramids and
//! logits) are read as plain values and never receive gradients, regardless
//! of how they were registered: the stop-gradient is structural, not a
//! convention the caller has to remember.

use crate::error::{Error, Result};
use crate::pyramid::{validate_level_set, FeaturePyramid};
use crate::tensor::ops;
use crate::tensor::{BackwardFn, Scalar, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Label value excluded from segmentation losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

/// Stabilizer added to attention-map L2 norms; an all-zero map normalizes to
/// the zero vector instead of erroring.
pub const AT_NORM_EPS: f64 = 1e-12;

fn default_lambda_at() -> f64 {
    10.0
}
fn default_p() -> u32 {
    2
}
fn default_tau() -> f64 {
    4.0
}
fn default_lambda_d() -> f64 {
    3.0
}
fn default_lambda_ld() -> f64 {
    1.0
}
fn default_levels() -> Vec<u8> {
    vec![2, 3, 4, 5]
}
fn default_eps() -> f64 {
    1e-5
}

/// Weights and knobs shared by every distillation objective.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Attention-transfer weight in the feature loss.
    pub lambda_at: f64,
    /// Power applied to absolute activations in attention maps, and the
    /// norm order of the map distance.
    pub p: u32,
    /// Softmax temperature for label distillation.
    pub tau: f64,
    /// Dice weight in the segmentation objective.
    pub lambda_d: f64,
    /// Label-distillation weight in the mixed loss.
    pub lambda_ld: f64,
    /// Pyramid levels the feature losses run over.
    pub levels: Vec<u8>,
    /// Variance stabilizer for whitening and the Dice denominator.
    pub eps: f64,
    /// Use the raw squared sum per level instead of the element-count mean.
    pub raw_sum_mse: bool,
    /// Multiply the label-distillation loss by tau^2 (classic gradient-scale
    /// correction; off to match the plain soft cross-entropy).
    pub kd_tau_squared: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda_at: default_lambda_at(),
            p: default_p(),
            tau: default_tau(),
            lambda_d: default_lambda_d(),
            lambda_ld: default_lambda_ld(),
            levels: default_levels(),
            eps: default_eps(),
            raw_sum_mse: false,
            kd_tau_squared: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_at < 0.0 || self.lambda_d < 0.0 || self.lambda_ld < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.p < 1 {
            return Err(Error::config("p must be at least 1"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps must be positive"));
        }
        validate_level_set(&self.levels)
    }
}

fn abs_pow<S: Scalar>(v: S, p: u32) -> S {
    match p {
        1 => v.abs(),
        2 => v * v,
        _ => v.abs().powi(p as i32),
    }
}

/// d|v|^p / dv. Zero at v = 0 (subgradient choice for p = 1).
fn abs_pow_grad<S: Scalar>(v: S, p: u32) -> S {
    if v == S::zero() {
        return S::zero();
    }
    let sign = if v > S::zero() { S::one() } else { -S::one() };
    match p {
        1 => sign,
        2 => S::from_f64(2.0) * v,
        _ => S::from_f64(p as f64) * v.abs().powi(p as i32 - 1) * sign,
    }
}

/// Whitens a 4-d array per spatial location and returns the per-location
/// 1/sqrt(var + eps) alongside.
fn whiten_with_stats<S: Scalar>(x: &ArrayD<S>, eps: f64) -> (ArrayD<S>, Vec<S>) {
    let (n, c, h, w) = dims4(x);
    let hw = h * w;
    let xs = x.as_slice().expect("standard layout");
    let inv_c = S::from_f64(1.0 / c as f64);
    let eps_s = S::from_f64(eps);
    let mut mean = vec![S::zero(); n * hw];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let loc = ni * hw;
            for i in 0..hw {
                mean[loc + i] += xs[base + i];
            }
        }
    }
    for m in &mut mean {
        *m = *m * inv_c;
    }
    let mut var = vec![S::zero(); n * hw];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let loc = ni * hw;
            for i in 0..hw {
                let d = xs[base + i] - mean[loc + i];
                var[loc + i] += d * d;
            }
        }
    }
    let mut inv_std = var;
    for v in &mut inv_std {
        *v = S::one() / (*v * inv_c + eps_s).sqrt();
    }
    let mut out = ArrayD::<S>::zeros(x.raw_dim());
    {
        let o = out.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let loc = ni * hw;
                for i in 0..hw {
                    o[base + i] = (xs[base + i] - mean[loc + i]) * inv_std[loc + i];
                }
            }
        }
    }
    (out, inv_std)
}

fn dims4<S: Scalar>(x: &ArrayD<S>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected 4-d tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// Non-learnable whitening: channels at each spatial location are shifted
/// and scaled to zero mean and unit variance.
pub fn whiten<S: Scalar>(tape: &Tape<S>, f: Var, eps: f64) -> Var {
    let fv = tape.value(f);
    let (n, c, h, w) = dims4(&fv);
    let hw = h * w;
    let (out, inv_std) = whiten_with_stats(&fv, eps);
    let rg = tape.requires_grad(f);
    if !rg {
        return tape.push(out, false, None);
    }
    let y = Arc::new(out.clone());
    let backward: BackwardFn<S> = Box::new(move |g| {
        let gs = g.as_slice().expect("standard layout");
        let ys = y.as_slice().unwrap();
        let inv_c = S::from_f64(1.0 / c as f64);
        // Per location: gx = inv_std * (g - mean_c(g) - y * mean_c(g*y)).
        let mut s1 = vec![S::zero(); n * hw];
        let mut s2 = vec![S::zero(); n * hw];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let loc = ni * hw;
                for i in 0..hw {
                    s1[loc + i] += gs[base + i];
                    s2[loc + i] += gs[base + i] * ys[base + i];
                }
            }
        }
        let mut gx = ArrayD::<S>::zeros(g.raw_dim());
        {
            let gxs = gx.as_slice_mut().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let loc = ni * hw;
                    for i in 0..hw {
                        gxs[base + i] = inv_std[loc + i]
                            * (gs[base + i]
                                - s1[loc + i] * inv_c
                                - ys[base + i] * s2[loc + i] * inv_c);
                    }
                }
            }
        }
        vec![(f.0, gx)]
    });
    tape.push(out, true, Some(backward))
}

/// Channel-collapsed spatial attention: out[b,0,h,w] = sum_c |f[b,c,h,w]|^p.
pub fn attention_map<S: Scalar>(tape: &Tape<S>, f: Var, p: u32) -> Var {
    assert!(p >= 1, "attention_map: p must be at least 1");
    let fv = tape.value(f);
    let (n, c, h, w) = dims4(&fv);
    let hw = h * w;
    let xs = fv.as_slice().expect("standard layout");
    let mut out = ArrayD::<S>::zeros(IxDyn(&[n, 1, h, w]));
    {
        let o = out.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let loc = ni * hw;
                for i in 0..hw {
                    o[loc + i] += abs_pow(xs[base + i], p);
                }
            }
        }
    }
    let rg = tape.requires_grad(f);
    let backward: Option<BackwardFn<S>> = if rg {
        let fv = Arc::clone(&fv);
        Some(Box::new(move |g| {
            let gs = g.as_slice().expect("standard layout");
            let xs = fv.as_slice().unwrap();
            let mut gx = ArrayD::<S>::zeros(fv.raw_dim());
            {
                let gxs = gx.as_slice_mut().unwrap();
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let loc = ni * hw;
                        for i in 0..hw {
                            gxs[base + i] = gs[loc + i] * abs_pow_grad(xs[base + i], p);
                        }
                    }
                }
            }
            vec![(f.0, gx)]
        }))
    } else {
        None
    };
    tape.push(out, rg, backward)
}

/// Collects the per-level (student, teacher) pairs named by `config.levels`
/// and checks shape agreement.
fn matched_levels<S: Scalar>(
    tape: &Tape<S>,
    pyr_r: &FeaturePyramid<Var>,
    pyr_g: &FeaturePyramid<Var>,
    levels: &[u8],
) -> Result<Vec<(u8, Var, Var)>> {
    validate_level_set(levels)?;
    let mut out = Vec::with_capacity(levels.len());
    for &l in levels {
        let r = *pyr_r.get(l).ok_or_else(|| {
            Error::shape(format!("student pyramid missing level {l}"))
        })?;
        let g = *pyr_g.get(l).ok_or_else(|| {
            Error::shape(format!("teacher pyramid missing level {l}"))
        })?;
        let (rs, gs) = (tape.shape(r), tape.shape(g));
        if rs != gs {
            return Err(Error::shape(format!(
                "level {l} shape mismatch: student {rs:?} vs teacher {gs:?}"
            )));
        }
        out.push((l, r, g));
    }
    Ok(out)
}

/// Whitened feature regression: mean over levels of the (element-count
/// normalized) squared difference between student features and whitened
/// teacher features. Gradients flow to the student side only.
pub fn mse_distill_loss<S: Scalar>(
    tape: &Tape<S>,
    pyr_r: &FeaturePyramid<Var>,
    pyr_g: &FeaturePyramid<Var>,
    config: &DistillConfig,
) -> Result<Var> {
    config.validate()?;
    let pairs = matched_levels(tape, pyr_r, pyr_g, &config.levels)?;
    let num_levels = pairs.len() as f64;
    let raw = config.raw_sum_mse;
    let mut total = 0.0f64;
    let mut captured: Vec<(usize, Arc<ArrayD<S>>, Arc<ArrayD<S>>, f64)> = Vec::new();
    let mut any_grad = false;
    for (_, r, g) in &pairs {
        let rv = tape.value(*r);
        let gv = tape.value(*g);
        let (wg, _) = whiten_with_stats(&gv, config.eps);
        let count = rv.len();
        let mut acc = 0.0f64;
        for (a, b) in rv.iter().zip(wg.iter()) {
            let d = (*a - *b).to_f64();
            acc += d * d;
        }
        let norm = if raw { 1.0 } else { count as f64 };
        total += acc / norm;
        // Per-element gradient coefficient: 2/(L * norm).
        let coeff = 2.0 / (num_levels * norm);
        if tape.requires_grad(*r) {
            any_grad = true;
        }
        captured.push((r.0, rv, Arc::new(wg), coeff));
    }
    let value = ArrayD::from_elem(IxDyn(&[]), S::from_f64(total / num_levels));
    let grad_flags: Vec<bool> =
        pairs.iter().map(|(_, r, _)| tape.requires_grad(*r)).collect();
    let backward: Option<BackwardFn<S>> = if any_grad {
        Some(Box::new(move |g| {
            let gs = g[IxDyn(&[])];
            let mut out = Vec::new();
            for ((rid, rv, wg, coeff), flag) in captured.iter().zip(grad_flags.iter()) {
                if !flag {
                    continue;
                }
                let c = S::from_f64(*coeff) * gs;
                let mut gr = ArrayD::<S>::zeros(rv.raw_dim());
                {
                    let grs = gr.as_slice_mut().unwrap();
                    let rs = rv.as_slice().unwrap();
                    let ws = wg.as_slice().unwrap();
                    for i in 0..grs.len() {
                        grs[i] = c * (rs[i] - ws[i]);
                    }
                }
                out.push((*rid, gr));
            }
            out
        }))
    } else {
        None
    };
    Ok(tape.push(value, any_grad, backward))
}

/// Flattened attention maps for one 4-d tensor: per sample, the vectorized
/// map and its L2 norm.
fn attention_vectors<S: Scalar>(x: &ArrayD<S>, p: u32) -> (Vec<S>, Vec<f64>) {
    let (n, c, h, w) = dims4(x);
    let hw = h * w;
    let xs = x.as_slice().expect("standard layout");
    let mut maps = vec![S::zero(); n * hw];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let loc = ni * hw;
            for i in 0..hw {
                maps[loc + i] += abs_pow(xs[base + i], p);
            }
        }
    }
    let norms = (0..n)
        .map(|ni| {
            maps[ni * hw..(ni + 1) * hw]
                .iter()
                .map(|v| {
                    let f = (*v).to_f64();
                    f * f
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    (maps, norms)
}

/// Attention transfer: per level and sample, the attention maps are
/// vectorized, L2-normalized, and compared with the p-norm distance;
/// the result is averaged over samples and levels. Student-side gradients
/// only.
pub fn at_distill_loss<S: Scalar>(
    tape: &Tape<S>,
    pyr_r: &FeaturePyramid<Var>,
    pyr_g: &FeaturePyramid<Var>,
    config: &DistillConfig,
) -> Result<Var> {
    config.validate()?;
    let pairs = matched_levels(tape, pyr_r, pyr_g, &config.levels)?;
    let num_levels = pairs.len() as f64;
    let p = config.p;

    struct LevelCapture<S: Scalar> {
        rid: usize,
        rv: Arc<ArrayD<S>>,
        /// Teacher maps, already L2-normalized, per sample.
        v_hat: Vec<f64>,
        requires_grad: bool,
    }

    let mut total = 0.0f64;
    let mut captures: Vec<LevelCapture<S>> = Vec::new();
    for (_, r, g) in &pairs {
        let rv = tape.value(*r);
        let gv = tape.value(*g);
        let (n, _, h, w) = dims4(&rv);
        let hw = h * w;
        let (r_maps, r_norms) = attention_vectors(&rv, p);
        let (g_maps, g_norms) = attention_vectors(&gv, p);
        let mut v_hat = vec![0.0f64; n * hw];
        let mut level_acc = 0.0f64;
        for ni in 0..n {
            let nr = r_norms[ni] + AT_NORM_EPS;
            let ng = g_norms[ni] + AT_NORM_EPS;
            let mut dist_acc = 0.0f64;
            for i in 0..hw {
                let idx = ni * hw + i;
                let vg = g_maps[idx].to_f64() / ng;
                v_hat[idx] = vg;
                let d = (r_maps[idx].to_f64() / nr - vg).abs();
                dist_acc += d.powi(p as i32);
            }
            level_acc += dist_acc.powf(1.0 / p as f64);
        }
        total += level_acc / n as f64;
        captures.push(LevelCapture {
            rid: r.0,
            rv,
            v_hat,
            requires_grad: tape.requires_grad(*r),
        });
    }
    let any_grad = captures.iter().any(|c| c.requires_grad);
    let value = ArrayD::from_elem(IxDyn(&[]), S::from_f64(total / num_levels));
    let backward: Option<BackwardFn<S>> = if any_grad {
        Some(Box::new(move |g| {
            let upstream = g[IxDyn(&[])].to_f64();
            let mut out = Vec::new();
            for cap in captures.iter().filter(|c| c.requires_grad) {
                let (n, c, h, w) = dims4(&cap.rv);
                let hw = h * w;
                let (r_maps, r_norms) = attention_vectors(&cap.rv, p);
                let mut gq = vec![0.0f64; n * hw];
                for ni in 0..n {
                    let norm = r_norms[ni];
                    let nr = norm + AT_NORM_EPS;
                    // Recompute the normalized difference and its p-norm.
                    let mut dist_p = 0.0f64;
                    let mut d = vec![0.0f64; hw];
                    for i in 0..hw {
                        let idx = ni * hw + i;
                        d[i] = r_maps[idx].to_f64() / nr - cap.v_hat[idx];
                        dist_p += d[i].abs().powi(p as i32);
                    }
                    let dist = dist_p.powf(1.0 / p as f64);
                    if dist == 0.0 || norm == 0.0 {
                        continue;
                    }
                    let scale = upstream / (n as f64 * num_levels);
                    // gd_i = |d_i|^(p-1) sign(d_i) / dist^(p-1), then through
                    // u = q / (|q| + eps).
                    let mut dot = 0.0f64;
                    let mut gu = vec![0.0f64; hw];
                    for i in 0..hw {
                        let di = d[i];
                        let gd = if di == 0.0 {
                            0.0
                        } else {
                            di.abs().powi(p as i32 - 1) * di.signum()
                                / dist.powi(p as i32 - 1)
                        };
                        gu[i] = gd * scale;
                        dot += gu[i] * r_maps[ni * hw + i].to_f64();
                    }
                    for i in 0..hw {
                        let q = r_maps[ni * hw + i].to_f64();
                        gq[ni * hw + i] = gu[i] / nr - dot * q / (nr * nr * norm);
                    }
                }
                // Through the attention map into the feature tensor.
                let mut gr = ArrayD::<S>::zeros(cap.rv.raw_dim());
                {
                    let grs = gr.as_slice_mut().unwrap();
                    let rs = cap.rv.as_slice().unwrap();
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let loc = ni * hw;
                            for i in 0..hw {
                                grs[base + i] = S::from_f64(gq[loc + i])
                                    * abs_pow_grad(rs[base + i], p);
                            }
                        }
                    }
                }
                out.push((cap.rid, gr));
            }
            out
        }))
    } else {
        None
    };
    Ok(tape.push(value, any_grad, backward))
}

/// Combined feature objective: MSE + lambda_at * AT.
pub fn feat_loss<S: Scalar>(
    tape: &Tape<S>,
    pyr_r: &FeaturePyramid<Var>,
    pyr_g: &FeaturePyramid<Var>,
    config: &DistillConfig,
) -> Result<Var> {
    let mse = mse_distill_loss(tape, pyr_r, pyr_g, config)?;
    if config.lambda_at == 0.0 {
        return Ok(mse);
    }
    let at = at_distill_loss(tape, pyr_r, pyr_g, config)?;
    Ok(ops::add(tape, mse, ops::scale(tape, at, config.lambda_at)))
}

fn check_mask<S: Scalar>(logits: &ArrayD<S>, y: &ArrayD<u8>) -> Result<(usize, usize, usize, usize)> {
    let (b, k, h, w) = dims4(logits);
    if y.shape() != [b, h, w] {
        return Err(Error::shape(format!(
            "mask shape {:?} does not match logits {:?}",
            y.shape(),
            logits.shape()
        )));
    }
    if k >= IGNORE_INDEX as usize {
        return Err(Error::config(format!(
            "{k} classes collide with the ignore index {IGNORE_INDEX}"
        )));
    }
    for &label in y.iter() {
        if label != IGNORE_INDEX && label as usize >= k {
            return Err(Error::index(format!(
                "label {label} out of range for {k} classes"
            )));
        }
    }
    Ok((b, k, h, w))
}

/// Per-pixel softmax probabilities, lane layout [K] per call site.
fn softmax_pixel<S: Scalar>(logits: &[S], k: usize, stride: usize, out: &mut [f64]) {
    let mut m = f64::NEG_INFINITY;
    for ki in 0..k {
        m = m.max(logits[ki * stride].to_f64());
    }
    let mut sum = 0.0;
    for ki in 0..k {
        let e = (logits[ki * stride].to_f64() - m).exp();
        out[ki] = e;
        sum += e;
    }
    for v in out.iter_mut().take(k) {
        *v /= sum;
    }
}

/// Pixelwise cross-entropy with ignore-index, averaged over counted pixels.
pub fn cross_entropy_loss<S: Scalar>(
    tape: &Tape<S>,
    logits: Var,
    y: &ArrayD<u8>,
) -> Result<Var> {
    let lv = tape.value(logits);
    let (b, k, h, w) = check_mask(&lv, y)?;
    let hw = h * w;
    let ls = lv.as_slice().expect("standard layout");
    let ys = y.as_slice().expect("standard layout");
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut probs = vec![0.0f64; k];
    for bi in 0..b {
        for i in 0..hw {
            let label = ys[bi * hw + i];
            if label == IGNORE_INDEX {
                continue;
            }
            let base = bi * k * hw + i;
            softmax_pixel(&ls[base..], k, hw, &mut probs);
            total -= probs[label as usize].ln();
            count += 1;
        }
    }
    let value = if count == 0 { 0.0 } else { total / count as f64 };
    let out = ArrayD::from_elem(IxDyn(&[]), S::from_f64(value));
    let rg = tape.requires_grad(logits) && count > 0;
    let backward: Option<BackwardFn<S>> = if rg {
        let lv = Arc::clone(&lv);
        let y = y.clone();
        Some(Box::new(move |g| {
            let gs = g[IxDyn(&[])].to_f64();
            let ls = lv.as_slice().unwrap();
            let ys = y.as_slice().unwrap();
            let scale = gs / count as f64;
            let mut gx = ArrayD::<S>::zeros(lv.raw_dim());
            {
                let gxs = gx.as_slice_mut().unwrap();
                let mut probs = vec![0.0f64; k];
                for bi in 0..b {
                    for i in 0..hw {
                        let label = ys[bi * hw + i];
                        if label == IGNORE_INDEX {
                            continue;
                        }
                        let base = bi * k * hw + i;
                        softmax_pixel(&ls[base..], k, hw, &mut probs);
                        for ki in 0..k {
                            let onehot = if ki == label as usize { 1.0 } else { 0.0 };
                            gxs[base + ki * hw] =
                                S::from_f64((probs[ki] - onehot) * scale);
                        }
                    }
                }
            }
            vec![(logits.0, gx)]
        }))
    } else {
        None
    };
    Ok(tape.push(out, rg, backward))
}

/// Soft multiclass Dice loss: 1 - mean_k 2*sum(p*g) / (sum p + sum g + eps),
/// sums taken over every counted pixel in the batch.
pub fn dice_loss<S: Scalar>(
    tape: &Tape<S>,
    logits: Var,
    y: &ArrayD<u8>,
    eps: f64,
) -> Result<Var> {
    let lv = tape.value(logits);
    let (b, k, h, w) = check_mask(&lv, y)?;
    let hw = h * w;
    let ls = lv.as_slice().expect("standard layout");
    let ys = y.as_slice().expect("standard layout");
    let mut inter = vec![0.0f64; k];
    let mut psum = vec![0.0f64; k];
    let mut gsum = vec![0.0f64; k];
    let mut probs = vec![0.0f64; k];
    for bi in 0..b {
        for i in 0..hw {
            let label = ys[bi * hw + i];
            if label == IGNORE_INDEX {
                continue;
            }
            let base = bi * k * hw + i;
            softmax_pixel(&ls[base..], k, hw, &mut probs);
            for ki in 0..k {
                psum[ki] += probs[ki];
            }
            inter[label as usize] += probs[label as usize];
            gsum[label as usize] += 1.0;
        }
    }
    let mut dice_mean = 0.0f64;
    for ki in 0..k {
        dice_mean += 2.0 * inter[ki] / (psum[ki] + gsum[ki] + eps);
    }
    dice_mean /= k as f64;
    let out = ArrayD::from_elem(IxDyn(&[]), S::from_f64(1.0 - dice_mean));
    let rg = tape.requires_grad(logits);
    let backward: Option<BackwardFn<S>> = if rg {
        let lv = Arc::clone(&lv);
        let y = y.clone();
        Some(Box::new(move |g| {
            let gs = g[IxDyn(&[])].to_f64();
            let ls = lv.as_slice().unwrap();
            let ys = y.as_slice().unwrap();
            // d(loss)/d(p_k(x)) = -(1/K) * (2*g_k(x)*D_k - 2*I_k) / D_k^2
            // with D_k = psum_k + gsum_k + eps, then through the softmax.
            let denom: Vec<f64> =
                (0..k).map(|ki| psum[ki] + gsum[ki] + eps).collect();
            let mut gx = ArrayD::<S>::zeros(lv.raw_dim());
            {
                let gxs = gx.as_slice_mut().unwrap();
                let mut probs = vec![0.0f64; k];
                let mut gp = vec![0.0f64; k];
                for bi in 0..b {
                    for i in 0..hw {
                        let label = ys[bi * hw + i];
                        if label == IGNORE_INDEX {
                            continue;
                        }
                        let base = bi * k * hw + i;
                        softmax_pixel(&ls[base..], k, hw, &mut probs);
                        let mut dot = 0.0f64;
                        for ki in 0..k {
                            let gk = if ki == label as usize { 1.0 } else { 0.0 };
                            gp[ki] = -(2.0 * gk * denom[ki] - 2.0 * inter[ki])
                                / (denom[ki] * denom[ki])
                                / k as f64;
                            dot += gp[ki] * probs[ki];
                        }
                        for ki in 0..k {
                            gxs[base + ki * hw] =
                                S::from_f64(probs[ki] * (gp[ki] - dot) * gs);
                        }
                    }
                }
            }
            vec![(logits.0, gx)]
        }))
    } else {
        None
    };
    Ok(tape.push(out, rg, backward))
}

/// Segmentation objective: cross-entropy plus weighted Dice.
pub fn interpreter_loss<S: Scalar>(
    tape: &Tape<S>,
    logits: Var,
    y: &ArrayD<u8>,
    config: &DistillConfig,
) -> Result<Var> {
    config.validate()?;
    let ce = cross_entropy_loss(tape, logits, y)?;
    let dice = dice_loss(tape, logits, y, config.eps)?;
    Ok(ops::add(tape, ce, ops::scale(tape, dice, config.lambda_d)))
}

/// Soft-label distillation: cross-entropy of the student's softened pixel
/// distribution under the teacher's, averaged over batch and pixels.
/// Gradients flow to the student logits only.
pub fn label_distill_loss<S: Scalar>(
    tape: &Tape<S>,
    logits_g: Var,
    logits_r: Var,
    config: &DistillConfig,
) -> Result<Var> {
    config.validate()?;
    let gv = tape.value(logits_g);
    let rv = tape.value(logits_r);
    if gv.shape() != rv.shape() {
        return Err(Error::shape(format!(
            "soft-label shape mismatch: teacher {:?} vs student {:?}",
            gv.shape(),
            rv.shape()
        )));
    }
    let (b, k, h, w) = dims4(&gv);
    let hw = h * w;
    let tau = config.tau;
    let scale = if config.kd_tau_squared { tau * tau } else { 1.0 };
    let npix = (b * hw) as f64;

    // Softened distributions, computed from logits/tau lanes.
    let softened = |ls: &[S], base: usize, out: &mut [f64]| {
        let mut m = f64::NEG_INFINITY;
        for ki in 0..k {
            m = m.max(ls[base + ki * hw].to_f64() / tau);
        }
        let mut sum = 0.0;
        for ki in 0..k {
            let e = (ls[base + ki * hw].to_f64() / tau - m).exp();
            out[ki] = e;
            sum += e;
        }
        for v in out.iter_mut().take(k) {
            *v /= sum;
        }
    };

    let gsl = gv.as_slice().expect("standard layout");
    let rsl = rv.as_slice().expect("standard layout");
    let mut total = 0.0f64;
    {
        let mut pg = vec![0.0f64; k];
        let mut pr = vec![0.0f64; k];
        for bi in 0..b {
            for i in 0..hw {
                let base = bi * k * hw + i;
                softened(gsl, base, &mut pg);
                softened(rsl, base, &mut pr);
                for ki in 0..k {
                    total -= pg[ki] * pr[ki].ln();
                }
            }
        }
    }
    let out = ArrayD::from_elem(IxDyn(&[]), S::from_f64(total / npix * scale));
    let rg = tape.requires_grad(logits_r);
    let backward: Option<BackwardFn<S>> = if rg {
        let gv = Arc::clone(&gv);
        let rv = Arc::clone(&rv);
        Some(Box::new(move |g| {
            let gs = g[IxDyn(&[])].to_f64();
            let gsl = gv.as_slice().unwrap();
            let rsl = rv.as_slice().unwrap();
            let coeff = gs * scale / (tau * npix);
            let mut gx = ArrayD::<S>::zeros(rv.raw_dim());
            {
                let gxs = gx.as_slice_mut().unwrap();
                let mut pg = vec![0.0f64; k];
                let mut pr = vec![0.0f64; k];
                for bi in 0..b {
                    for i in 0..hw {
                        let base = bi * k * hw + i;
                        let softened_g = |ls: &[S], out: &mut [f64]| {
                            let mut m = f64::NEG_INFINITY;
                            for ki in 0..k {
                                m = m.max(ls[base + ki * hw].to_f64() / tau);
                            }
                            let mut sum = 0.0;
                            for ki in 0..k {
                                let e = (ls[base + ki * hw].to_f64() / tau - m).exp();
                                out[ki] = e;
                                sum += e;
                            }
                            for v in out.iter_mut().take(k) {
                                *v /= sum;
                            }
                        };
                        softened_g(gsl, &mut pg);
                        softened_g(rsl, &mut pr);
                        for ki in 0..k {
                            gxs[base + ki * hw] =
                                S::from_f64((pr[ki] - pg[ki]) * coeff);
                        }
                    }
                }
            }
            vec![(logits_r.0, gx)]
        }))
    } else {
        None
    };
    Ok(tape.push(out, rg, backward))
}

/// Mixed pretraining objective: feat + lambda_ld * ld.
pub fn mix_loss<S: Scalar>(tape: &Tape<S>, feat: Var, ld: Var, config: &DistillConfig) -> Var {
    if config.lambda_ld == 0.0 {
        return feat;
    }
    ops::add(tape, feat, ops::scale(tape, ld, config.lambda_ld))
}
