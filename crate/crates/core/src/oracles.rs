//! Reference implementations of the distillation kernels, written as plain
//! scalar loops in double precision.
//!
//! Nothing here shares code with the production losses: these functions
//! transcribe the formulas index by index and exist solely so tests can
//! compare the optimized paths against an independent source of truth.
//! Inputs are expected to be small; everything is O(elements) or worse with
//! no regard for speed.

use ndarray::ArrayD;

/// Label value excluded from cross-entropy and Dice statistics.
pub const IGNORE_INDEX: usize = 255;

/// Guard added to attention-map L2 norms so all-zero maps normalize to zero.
pub const AT_NORM_EPS: f64 = 1e-12;

/// Central-difference gradient of a scalar function, h=1e-5 by convention.
pub fn finite_difference_grad<F>(f: F, x: &ArrayD<f64>, h: f64) -> ArrayD<f64>
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + h;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - h;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (up - down) / (2.0 * h);
    }
    grad
}

/// Relative error with a floor so near-zero pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(f64::max(a.abs(), b.abs()), 1e-6)
}

/// Per-location channel whitening: (f - mu) / sqrt(var + eps), statistics
/// over the channel axis independently at every (batch, h, w).
pub fn oracle_whiten(f: &ArrayD<f64>, eps: f64) -> ArrayD<f64> {
    assert_eq!(f.ndim(), 4);
    let (b, c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
    let mut out = ArrayD::zeros(f.raw_dim());
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let mut mean = 0.0;
                for ci in 0..c {
                    mean += f[[bi, ci, hi, wi]];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ci in 0..c {
                    let d = f[[bi, ci, hi, wi]] - mean;
                    var += d * d;
                }
                var /= c as f64;
                let denom = (var + eps).sqrt();
                for ci in 0..c {
                    out[[bi, ci, hi, wi]] = (f[[bi, ci, hi, wi]] - mean) / denom;
                }
            }
        }
    }
    out
}

/// Whitened feature regression: mean over levels of the squared difference
/// between student features and whitened teacher features. Each level's
/// squared sum is divided by its element count unless `raw_sum` is set.
pub fn oracle_mse(
    pyr_r: &[ArrayD<f64>],
    pyr_g: &[ArrayD<f64>],
    eps: f64,
    raw_sum: bool,
) -> f64 {
    assert_eq!(pyr_r.len(), pyr_g.len());
    assert!(!pyr_r.is_empty());
    let mut total = 0.0;
    for (r, g) in pyr_r.iter().zip(pyr_g.iter()) {
        assert_eq!(r.shape(), g.shape());
        let wg = oracle_whiten(g, eps);
        let mut acc = 0.0;
        for (rv, wv) in r.iter().zip(wg.iter()) {
            let d = rv - wv;
            acc += d * d;
        }
        if !raw_sum {
            acc /= r.len() as f64;
        }
        total += acc;
    }
    total / pyr_r.len() as f64
}

/// Channel-collapsed attention map: out[b,h,w] = sum_c |f[b,c,h,w]|^p.
pub fn oracle_attention_map(f: &ArrayD<f64>, p: u32) -> ArrayD<f64> {
    assert_eq!(f.ndim(), 4);
    let (b, c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
    let mut out = ArrayD::zeros(ndarray::IxDyn(&[b, 1, h, w]));
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let mut acc = 0.0;
                for ci in 0..c {
                    acc += f[[bi, ci, hi, wi]].abs().powi(p as i32);
                }
                out[[bi, 0, hi, wi]] = acc;
            }
        }
    }
    out
}

/// Attention transfer: per level and sample, vectorize the attention maps,
/// L2-normalize each (zero maps normalize to zero), take the p-norm of the
/// difference, then average over samples and levels.
pub fn oracle_at(pyr_r: &[ArrayD<f64>], pyr_g: &[ArrayD<f64>], p: u32) -> f64 {
    assert_eq!(pyr_r.len(), pyr_g.len());
    assert!(!pyr_r.is_empty());
    let mut total = 0.0;
    for (r, g) in pyr_r.iter().zip(pyr_g.iter()) {
        let (b, h, w) = (r.shape()[0], r.shape()[2], r.shape()[3]);
        assert_eq!(b, g.shape()[0]);
        assert_eq!(h, g.shape()[2]);
        assert_eq!(w, g.shape()[3]);
        let map_r = oracle_attention_map(r, p);
        let map_g = oracle_attention_map(g, p);
        let mut level_acc = 0.0;
        for bi in 0..b {
            let mut qr = Vec::with_capacity(h * w);
            let mut qg = Vec::with_capacity(h * w);
            for hi in 0..h {
                for wi in 0..w {
                    qr.push(map_r[[bi, 0, hi, wi]]);
                    qg.push(map_g[[bi, 0, hi, wi]]);
                }
            }
            let nr = qr.iter().map(|v| v * v).sum::<f64>().sqrt() + AT_NORM_EPS;
            let ng = qg.iter().map(|v| v * v).sum::<f64>().sqrt() + AT_NORM_EPS;
            let mut dist_acc = 0.0;
            for i in 0..h * w {
                let d = (qr[i] / nr - qg[i] / ng).abs();
                dist_acc += d.powi(p as i32);
            }
            level_acc += dist_acc.powf(1.0 / p as f64);
        }
        total += level_acc / b as f64;
    }
    total / pyr_r.len() as f64
}

fn softmax_lane(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|v| v / s).collect()
}

/// Soft-label cross-entropy at temperature tau: -sum_k P_g[k] ln P_r[k] per
/// pixel, averaged over batch and pixels. `tau_squared` multiplies the
/// result by tau^2 (the classic gradient-scale correction, off by default).
pub fn oracle_kd(
    logits_g: &ArrayD<f64>,
    logits_r: &ArrayD<f64>,
    tau: f64,
    tau_squared: bool,
) -> f64 {
    assert_eq!(logits_g.shape(), logits_r.shape());
    assert!(tau > 0.0);
    let (b, k, h, w) = (
        logits_g.shape()[0],
        logits_g.shape()[1],
        logits_g.shape()[2],
        logits_g.shape()[3],
    );
    let mut total = 0.0;
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let zg: Vec<f64> = (0..k).map(|ki| logits_g[[bi, ki, hi, wi]] / tau).collect();
                let zr: Vec<f64> = (0..k).map(|ki| logits_r[[bi, ki, hi, wi]] / tau).collect();
                let pg = softmax_lane(&zg);
                let pr = softmax_lane(&zr);
                for ki in 0..k {
                    total -= pg[ki] * pr[ki].ln();
                }
            }
        }
    }
    let mut loss = total / (b * h * w) as f64;
    if tau_squared {
        loss *= tau * tau;
    }
    loss
}

/// Soft multiclass Dice loss: 1 - mean_k 2*sum(p_k*g_k) / (sum p_k + sum g_k
/// + eps), sums over every non-ignored pixel in the batch, p = softmax of
/// the logits, g = one-hot target.
pub fn oracle_dice(logits: &ArrayD<f64>, y: &ArrayD<usize>, eps: f64) -> f64 {
    let (b, k, h, w) = (
        logits.shape()[0],
        logits.shape()[1],
        logits.shape()[2],
        logits.shape()[3],
    );
    assert_eq!(y.shape(), [b, h, w]);
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut gsum = vec![0.0; k];
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let label = y[[bi, hi, wi]];
                if label == IGNORE_INDEX {
                    continue;
                }
                assert!(label < k, "label {label} out of range for {k} classes");
                let z: Vec<f64> = (0..k).map(|ki| logits[[bi, ki, hi, wi]]).collect();
                let p = softmax_lane(&z);
                for ki in 0..k {
                    inter[ki] += p[ki] * if label == ki { 1.0 } else { 0.0 };
                    psum[ki] += p[ki];
                    gsum[ki] += if label == ki { 1.0 } else { 0.0 };
                }
            }
        }
    }
    let mut dice_mean = 0.0;
    for ki in 0..k {
        dice_mean += 2.0 * inter[ki] / (psum[ki] + gsum[ki] + eps);
    }
    dice_mean /= k as f64;
    1.0 - dice_mean
}

/// Pixelwise cross-entropy with ignore-index, averaged over counted pixels.
pub fn oracle_ce(logits: &ArrayD<f64>, y: &ArrayD<usize>) -> f64 {
    let (b, k, h, w) = (
        logits.shape()[0],
        logits.shape()[1],
        logits.shape()[2],
        logits.shape()[3],
    );
    assert_eq!(y.shape(), [b, h, w]);
    let mut total = 0.0;
    let mut count = 0usize;
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let label = y[[bi, hi, wi]];
                if label == IGNORE_INDEX {
                    continue;
                }
                assert!(label < k);
                let z: Vec<f64> = (0..k).map(|ki| logits[[bi, ki, hi, wi]]).collect();
                let p = softmax_lane(&z);
                total -= p[label].ln();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Full segmentation objective: cross-entropy plus weighted Dice.
pub fn oracle_interpreter(
    logits: &ArrayD<f64>,
    y: &ArrayD<usize>,
    lambda_d: f64,
    eps: f64,
) -> f64 {
    oracle_ce(logits, y) + lambda_d * oracle_dice(logits, y, eps)
}
