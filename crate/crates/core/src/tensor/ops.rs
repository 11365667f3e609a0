//! Elementwise ops, activations, normalization, and reductions on the tape.
//!
//! Every op pushes exactly one node. Backward closures capture `Arc` clones
//! of forward values; cheap quantities (sigmoids) are recomputed instead of
//! stored to keep activation memory down.

use super::{BackwardFn, Scalar, Tape, Var};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, IxDyn, Slice};
use rand::Rng;
use std::sync::Arc;

pub fn add<S: Scalar>(tape: &Tape<S>, a: Var, b: Var) -> Var {
    let av = tape.value(a);
    let bv = tape.value(b);
    assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
    let out = &*av + &*bv;
    let (ra, rb) = (tape.requires_grad(a), tape.requires_grad(b));
    let backward: Option<BackwardFn<S>> = if ra || rb {
        Some(Box::new(move |g| {
            let mut out = Vec::new();
            if ra {
                out.push((a.0, g.clone()));
            }
            if rb {
                out.push((b.0, g.clone()));
            }
            out
        }))
    } else {
        None
    };
    tape.push(out, ra || rb, backward)
}

pub fn sub<S: Scalar>(tape: &Tape<S>, a: Var, b: Var) -> Var {
    let av = tape.value(a);
    let bv = tape.value(b);
    assert_eq!(av.shape(), bv.shape(), "sub: shape mismatch");
    let out = &*av - &*bv;
    let (ra, rb) = (tape.requires_grad(a), tape.requires_grad(b));
    let backward: Option<BackwardFn<S>> = if ra || rb {
        Some(Box::new(move |g| {
            let mut out = Vec::new();
            if ra {
                out.push((a.0, g.clone()));
            }
            if rb {
                out.push((b.0, g.mapv(|v| -v)));
            }
            out
        }))
    } else {
        None
    };
    tape.push(out, ra || rb, backward)
}

pub fn mul<S: Scalar>(tape: &Tape<S>, a: Var, b: Var) -> Var {
    let av = tape.value(a);
    let bv = tape.value(b);
    assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
    let out = &*av * &*bv;
    let (ra, rb) = (tape.requires_grad(a), tape.requires_grad(b));
    let backward: Option<BackwardFn<S>> = if ra || rb {
        let av = Arc::clone(&av);
        let bv = Arc::clone(&bv);
        Some(Box::new(move |g| {
            let mut out = Vec::new();
            if ra {
                out.push((a.0, g * &*bv));
            }
            if rb {
                out.push((b.0, g * &*av));
            }
            out
        }))
    } else {
        None
    };
    tape.push(out, ra || rb, backward)
}

pub fn scale<S: Scalar>(tape: &Tape<S>, x: Var, c: f64) -> Var {
    let xv = tape.value(x);
    let cs = S::from_f64(c);
    let out = xv.mapv(|v| v * cs);
    let rg = tape.requires_grad(x);
    let backward: Option<BackwardFn<S>> =
        if rg { Some(Box::new(move |g| vec![(x.0, g.mapv(|v| v * cs))])) } else { None };
    tape.push(out, rg, backward)
}

pub fn relu<S: Scalar>(tape: &Tape<S>, x: Var) -> Var {
    let xv = tape.value(x);
    let zero = S::zero();
    let out = xv.mapv(|v| if v > zero { v } else { zero });
    let rg = tape.requires_grad(x);
    let backward: Option<BackwardFn<S>> = if rg {
        let xv = Arc::clone(&xv);
        Some(Box::new(move |g| {
            let mut gx = g.clone();
            gx.zip_mut_with(&xv, |gv, &v| {
                if v <= S::zero() {
                    *gv = S::zero();
                }
            });
            vec![(x.0, gx)]
        }))
    } else {
        None
    };
    tape.push(out, rg, backward)
}

fn sigmoid_scalar<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

pub fn sigmoid<S: Scalar>(tape: &Tape<S>, x: Var) -> Var {
    let xv = tape.value(x);
    let out = xv.mapv(sigmoid_scalar);
    let rg = tape.requires_grad(x);
    let backward: Option<BackwardFn<S>> = if rg {
        let xv = Arc::clone(&xv);
        Some(Box::new(move |g| {
            let mut gx = g.clone();
            gx.zip_mut_with(&xv, |gv, &v| {
                let s = sigmoid_scalar(v);
                *gv = *gv * s * (S::one() - s);
            });
            vec![(x.0, gx)]
        }))
    } else {
        None
    };
    tape.push(out, rg, backward)
}

/// x * sigmoid(x).
pub fn silu<S: Scalar>(tape: &Tape<S>, x: Var) -> Var {
    let xv = tape.value(x);
    let out = xv.mapv(|v| v * sigmoid_scalar(v));
    let rg = tape.requires_grad(x);
    let backward: Option<BackwardFn<S>> = if rg {
        let xv = Arc::clone(&xv);
        Some(Box::new(move |g| {
            let mut gx = g.clone();
            gx.zip_mut_with(&xv, |gv, &v| {
                let s = sigmoid_scalar(v);
                *gv = *gv * s * (S::one() + v * (S::one() - s));
            });
            vec![(x.0, gx)]
        }))
    } else {
        None
    };
    tape.push(out, rg, backward)
}

pub(crate) fn softmax_array<S: Scalar>(x: &ArrayD<S>, axis: usize) -> ArrayD<S> {
    let max = x
        .map_axis(Axis(axis), |lane| {
            lane.iter().copied().fold(S::neg_infinity(), |a, b| if b > a { b } else { a })
        })
        .insert_axis(Axis(axis));
    let mut out = x.clone();
    out.zip_mut_with(&max.broadcast(x.raw_dim()).unwrap(), |o, &m| *o = (*o - m).exp());
    let sum = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
    out.zip_mut_with(&sum.broadcast(x.raw_dim()).unwrap(), |o, &s| *o = *o / s);
    out
}

pub fn softmax<S: Scalar>(tape: &Tape<S>, x: Var, axis: usize) -> Var {
    let xv = tape.value(x);
    let out = softmax_array(&xv, axis);
    let rg = tape.requires_grad(x);
    if !rg {
        return tape.push(out, false, None);
    }
    let p = Arc::new(out.clone());
    let backward: BackwardFn<S> = Box::new(move |g| {
        let dot = (g * &*p).sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let mut gx = g.clone();
        gx.zip_mut_with(&dot.broadcast(g.raw_dim()).unwrap(), |gv, &d| *gv = *gv - d);
        gx = &gx * &*p;
        vec![(x.0, gx)]
    });
    tape.push(out, true, Some(backward))
}

pub fn log_softmax<S: Scalar>(tape: &Tape<S>, x: Var, axis: usize) -> Var {
    let xv = tape.value(x);
    let max = xv
        .map_axis(Axis(axis), |lane| {
            lane.iter().copied().fold(S::neg_infinity(), |a, b| if b > a { b } else { a })
        })
        .insert_axis(Axis(axis));
    let mut shifted = (*xv).clone();
    shifted.zip_mut_with(&max.broadcast(xv.raw_dim()).unwrap(), |o, &m| *o = *o - m);
    let lse = shifted.mapv(|v| v.exp()).sum_axis(Axis(axis)).mapv(|v| v.ln()).insert_axis(Axis(axis));
    let mut out = shifted;
    out.zip_mut_with(&lse.broadcast(xv.raw_dim()).unwrap(), |o, &l| *o = *o - l);
    let rg = tape.requires_grad(x);
    if !rg {
        return tape.push(out, false, None);
    }
    let out_arc = Arc::new(out.clone());
    let backward: BackwardFn<S> = Box::new(move |g| {
        let p = out_arc.mapv(|v| v.exp());
        let sums = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let mut gx = g.clone();
        let sums_b = sums.broadcast(g.raw_dim()).unwrap();
        ndarray::Zip::from(&mut gx).and(&p).and(&sums_b).for_each(|gv, &pv, &sv| {
            *gv = *gv - pv * sv;
        });
        vec![(x.0, gx)]
    });
    tape.push(out, true, Some(backward))
}

pub fn reshape<S: Scalar>(tape: &Tape<S>, x: Var, shape: &[usize]) -> Var {
    let xv = tape.value(x);
    let in_shape = xv.shape().to_vec();
    assert_eq!(
        xv.len(),
        shape.iter().product::<usize>(),
        "reshape: element count mismatch {:?} -> {:?}",
        in_shape,
        shape
    );
    let out = xv
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape");
    let rg = tape.requires_grad(x);
    let backward: Option<BackwardFn<S>> = if rg {
        Some(Box::new(move |g| {
            let gx = g
                .clone()
                .into_shape_with_order(IxDyn(&in_shape))
                .expect("reshape backward");
            vec![(x.0, gx)]
        }))
    } else {
        None
    };
    tape.push(out, rg, backward)
}

pub fn concat<S: Scalar>(tape: &Tape<S>, parts: &[Var], axis: usize) -> Var {
    assert!(!parts.is_empty(), "concat: empty input");
    let values: Vec<_> = parts.iter().map(|&p| tape.value(p)).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let out = ndarray::concatenate(Axis(axis), &views)
        .expect("concat: incompatible shapes")
        .as_standard_layout()
        .to_owned();
    let flags: Vec<bool> = parts.iter().map(|&p| tape.requires_grad(p)).collect();
    let rg = flags.iter().any(|&f| f);
    if !rg {
        return tape.push(out, false, None);
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
    let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let backward: BackwardFn<S> = Box::new(move |g| {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, &w) in widths.iter().enumerate() {
            if flags[i] {
                let piece = g
                    .slice_axis(Axis(axis), Slice::from(start..start + w))
                    .to_owned();
                out.push((ids[i], piece));
            }
            start += w;
        }
        out
    });
    tape.push(out, true, Some(backward))
}

/// Inverted dropout: surviving activations are scaled by 1/(1-p) so the
/// expected value is unchanged. Identity when `p <= 0`.
pub fn dropout<S: Scalar, R: Rng>(tape: &Tape<S>, x: Var, p: f64, rng: &mut R) -> Var {
    if p <= 0.0 {
        return x;
    }
    assert!(p < 1.0, "dropout: p must be < 1");
    let xv = tape.value(x);
    let keep = S::from_f64(1.0 / (1.0 - p));
    let mask = Arc::new(ArrayD::from_shape_fn(xv.raw_dim(), |_| {
        if rng.gen::<f64>() < p {
            S::zero()
        } else {
            keep
        }
    }));
    let out = &*xv * &*mask;
    let rg = tape.requires_grad(x);
    let backward: Option<BackwardFn<S>> = if rg {
        let mask = Arc::clone(&mask);
        Some(Box::new(move |g| vec![(x.0, g * &*mask)]))
    } else {
        None
    };
    tape.push(out, rg, backward)
}

pub fn mean_all<S: Scalar>(tape: &Tape<S>, x: Var) -> Var {
    let xv = tape.value(x);
    let n = xv.len();
    assert!(n > 0, "mean_all: empty input");
    let m = xv.iter().copied().sum::<S>() / S::from_f64(n as f64);
    let out = ArrayD::from_elem(IxDyn(&[]), m);
    let rg = tape.requires_grad(x);
    let shape = xv.shape().to_vec();
    let backward: Option<BackwardFn<S>> = if rg {
        Some(Box::new(move |g| {
            let gs = g[IxDyn(&[])] / S::from_f64(n as f64);
            vec![(x.0, ArrayD::from_elem(IxDyn(&shape), gs))]
        }))
    } else {
        None
    };
    tape.push(out, rg, backward)
}

pub fn sum_all<S: Scalar>(tape: &Tape<S>, x: Var) -> Var {
    let xv = tape.value(x);
    let s = xv.iter().copied().sum::<S>();
    let out = ArrayD::from_elem(IxDyn(&[]), s);
    let rg = tape.requires_grad(x);
    let shape = xv.shape().to_vec();
    let backward: Option<BackwardFn<S>> = if rg {
        Some(Box::new(move |g| {
            let gs = g[IxDyn(&[])];
            vec![(x.0, ArrayD::from_elem(IxDyn(&shape), gs))]
        }))
    } else {
        None
    };
    tape.push(out, rg, backward)
}

/// Fully connected layer: `x [N, D_in] @ w^T [D_in, D_out] + b`.
pub fn linear<S: Scalar>(tape: &Tape<S>, x: Var, w: Var, b: Option<Var>) -> Var {
    let xv = tape.value(x);
    let wv = tape.value(w);
    let x2 = xv.view().into_dimensionality::<Ix2>().expect("linear: x must be 2-d");
    let w2 = wv.view().into_dimensionality::<Ix2>().expect("linear: w must be 2-d");
    let (n, d_in) = x2.dim();
    let (d_out, d_in_w) = w2.dim();
    assert_eq!(d_in, d_in_w, "linear: dim mismatch");
    let mut out = Array2::<S>::zeros((n, d_out));
    general_mat_mul(S::one(), &x2, &w2.t(), S::zero(), &mut out);
    if let Some(b) = b {
        let bv = tape.value(b);
        assert_eq!(bv.shape(), [d_out], "linear: bias shape");
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for mut row in out.rows_mut() {
            row += &b1;
        }
    }
    let rx = tape.requires_grad(x);
    let rw = tape.requires_grad(w);
    let rb = b.map(|bb| tape.requires_grad(bb)).unwrap_or(false);
    let rg = rx || rw || rb;
    let backward: Option<BackwardFn<S>> = if rg {
        let xv = Arc::clone(&xv);
        let wv = Arc::clone(&wv);
        Some(Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let x2 = xv.view().into_dimensionality::<Ix2>().unwrap();
            let w2 = wv.view().into_dimensionality::<Ix2>().unwrap();
            let mut out = Vec::new();
            if rx {
                let mut gx = Array2::<S>::zeros((n, d_in));
                general_mat_mul(S::one(), &g2, &w2, S::zero(), &mut gx);
                out.push((x.0, gx.into_dyn()));
            }
            if rw {
                let mut gw = Array2::<S>::zeros((d_out, d_in));
                general_mat_mul(S::one(), &g2.t(), &x2, S::zero(), &mut gw);
                out.push((w.0, gw.into_dyn()));
            }
            if rb {
                out.push((b.unwrap().0, g2.sum_axis(Axis(0)).into_dyn()));
            }
            out
        }))
    } else {
        None
    };
    tape.push(out.into_dyn(), rg, backward)
}

/// Adds a per-sample, per-channel bias `t [N, C]` to `x [N, C, H, W]`.
/// Used to inject time embeddings into conv feature maps.
pub fn add_per_sample_bias<S: Scalar>(tape: &Tape<S>, x: Var, t: Var) -> Var {
    let xv = tape.value(x);
    let tv = tape.value(t);
    let xs = xv.shape().to_vec();
    assert_eq!(xs.len(), 4, "add_per_sample_bias: x must be 4-d");
    assert_eq!(tv.shape(), [xs[0], xs[1]], "add_per_sample_bias: t must be [N, C]");
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let mut out = (*xv).clone();
    {
        let t2 = tv.view().into_dimensionality::<Ix2>().unwrap();
        let o = out.as_slice_mut().expect("standard layout");
        for ni in 0..n {
            for ci in 0..c {
                let bias = t2[[ni, ci]];
                let base = (ni * c + ci) * h * w;
                for v in &mut o[base..base + h * w] {
                    *v = *v + bias;
                }
            }
        }
    }
    let rx = tape.requires_grad(x);
    let rt = tape.requires_grad(t);
    let rg = rx || rt;
    let backward: Option<BackwardFn<S>> = if rg {
        Some(Box::new(move |g| {
            let mut out = Vec::new();
            if rx {
                out.push((x.0, g.clone()));
            }
            if rt {
                let gs = g.as_slice().expect("standard layout");
                let mut gt = Array2::<S>::zeros((n, c));
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        gt[[ni, ci]] = gs[base..base + h * w].iter().copied().sum::<S>();
                    }
                }
                out.push((t.0, gt.into_dyn()));
            }
            out
        }))
    } else {
        None
    };
    tape.push(out, rg, backward)
}

fn norm_stats<S: Scalar>(xs: &[S]) -> (S, S) {
    let m = S::from_f64(xs.len() as f64);
    let mean = xs.iter().copied().sum::<S>() / m;
    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / m;
    (mean, var)
}

/// Batch normalization over (N, H, W) per channel, training mode. Returns
/// the output plus the biased batch mean/var so the caller can maintain
/// running statistics.
pub fn batch_norm_train<S: Scalar>(
    tape: &Tape<S>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> (Var, Array1<S>, Array1<S>) {
    let xv = tape.value(x);
    let gv = tape.value(gamma);
    let bv = tape.value(beta);
    let xs = xv.shape().to_vec();
    assert_eq!(xs.len(), 4, "batch_norm: x must be 4-d");
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    assert_eq!(gv.shape(), [c], "batch_norm: gamma shape");
    assert_eq!(bv.shape(), [c], "batch_norm: beta shape");
    let m = n * h * w;
    assert!(m > 0, "batch_norm: empty batch");
    let eps_s = S::from_f64(eps);

    let xsl = xv.as_slice().expect("standard layout");
    let mut mean = Array1::<S>::zeros(c);
    let mut var = Array1::<S>::zeros(c);
    for ci in 0..c {
        let mut acc = S::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            acc = acc + xsl[base..base + h * w].iter().copied().sum::<S>();
        }
        let mu = acc / S::from_f64(m as f64);
        let mut vacc = S::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for &v in &xsl[base..base + h * w] {
                vacc = vacc + (v - mu) * (v - mu);
            }
        }
        mean[ci] = mu;
        var[ci] = vacc / S::from_f64(m as f64);
    }

    let mut xhat = ArrayD::<S>::zeros(IxDyn(&xs));
    let mut out = ArrayD::<S>::zeros(IxDyn(&xs));
    {
        let xh = xhat.as_slice_mut().unwrap();
        let o = out.as_slice_mut().unwrap();
        let g1 = gv.as_slice().unwrap();
        let b1 = bv.as_slice().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let inv_std = S::one() / (var[ci] + eps_s).sqrt();
                let (mu, ga, be) = (mean[ci], g1[ci], b1[ci]);
                let base = (ni * c + ci) * h * w;
                for i in base..base + h * w {
                    let xh_v = (xsl[i] - mu) * inv_std;
                    xh[i] = xh_v;
                    o[i] = ga * xh_v + be;
                }
            }
        }
    }

    let rx = tape.requires_grad(x);
    let rga = tape.requires_grad(gamma);
    let rbe = tape.requires_grad(beta);
    let rg = rx || rga || rbe;
    let backward: Option<BackwardFn<S>> = if rg {
        let xhat = Arc::new(xhat);
        let gv = Arc::clone(&gv);
        let var = var.clone();
        Some(Box::new(move |g| {
            let gs = g.as_slice().expect("standard layout");
            let xh = xhat.as_slice().unwrap();
            let g1 = gv.as_slice().unwrap();
            let mf = S::from_f64(m as f64);
            let mut out = Vec::new();
            let mut dgamma = Array1::<S>::zeros(c);
            let mut dbeta = Array1::<S>::zeros(c);
            let mut sum_g = Array1::<S>::zeros(c);
            let mut sum_gx = Array1::<S>::zeros(c);
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for i in base..base + h * w {
                        sum_g[ci] = sum_g[ci] + gs[i];
                        sum_gx[ci] = sum_gx[ci] + gs[i] * xh[i];
                    }
                }
            }
            if rga || rbe {
                for ci in 0..c {
                    dgamma[ci] = sum_gx[ci];
                    dbeta[ci] = sum_g[ci];
                }
            }
            if rx {
                let mut gx = ArrayD::<S>::zeros(g.raw_dim());
                let gxs = gx.as_slice_mut().unwrap();
                for ni in 0..n {
                    for ci in 0..c {
                        let inv_std = S::one() / (var[ci] + eps_s).sqrt();
                        let coef = g1[ci] * inv_std / mf;
                        let (sg, sgx) = (sum_g[ci], sum_gx[ci]);
                        let base = (ni * c + ci) * h * w;
                        for i in base..base + h * w {
                            gxs[i] = coef * (mf * gs[i] - sg - xh[i] * sgx);
                        }
                    }
                }
                out.push((x.0, gx));
            }
            if rga {
                out.push((gamma.0, dgamma.into_dyn()));
            }
            if rbe {
                out.push((beta.0, dbeta.into_dyn()));
            }
            out
        }))
    } else {
        None
    };
    let out_var = tape.push(out, rg, backward);
    (out_var, mean, var)
}

/// Batch normalization using fixed (running) statistics.
pub fn batch_norm_eval<S: Scalar>(
    tape: &Tape<S>,
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &Array1<S>,
    var: &Array1<S>,
    eps: f64,
) -> Var {
    let xv = tape.value(x);
    let gv = tape.value(gamma);
    let bv = tape.value(beta);
    let xs = xv.shape().to_vec();
    assert_eq!(xs.len(), 4, "batch_norm: x must be 4-d");
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    assert_eq!(mean.len(), c, "batch_norm: mean shape");
    assert_eq!(var.len(), c, "batch_norm: var shape");
    let eps_s = S::from_f64(eps);
    let inv_std: Array1<S> = var.mapv(|v| S::one() / (v + eps_s).sqrt());

    let xsl = xv.as_slice().expect("standard layout");
    let mut out = ArrayD::<S>::zeros(IxDyn(&xs));
    {
        let o = out.as_slice_mut().unwrap();
        let g1 = gv.as_slice().unwrap();
        let b1 = bv.as_slice().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let (mu, is, ga, be) = (mean[ci], inv_std[ci], g1[ci], b1[ci]);
                let base = (ni * c + ci) * h * w;
                for i in base..base + h * w {
                    o[i] = ga * (xsl[i] - mu) * is + be;
                }
            }
        }
    }

    let rx = tape.requires_grad(x);
    let rga = tape.requires_grad(gamma);
    let rbe = tape.requires_grad(beta);
    let rg = rx || rga || rbe;
    let backward: Option<BackwardFn<S>> = if rg {
        let xv = Arc::clone(&xv);
        let gv = Arc::clone(&gv);
        let mean = mean.clone();
        Some(Box::new(move |g| {
            let gs = g.as_slice().expect("standard layout");
            let xsl = xv.as_slice().unwrap();
            let g1 = gv.as_slice().unwrap();
            let mut out = Vec::new();
            if rx {
                let mut gx = ArrayD::<S>::zeros(g.raw_dim());
                let gxs = gx.as_slice_mut().unwrap();
                for ni in 0..n {
                    for ci in 0..c {
                        let coef = g1[ci] * inv_std[ci];
                        let base = (ni * c + ci) * h * w;
                        for i in base..base + h * w {
                            gxs[i] = coef * gs[i];
                        }
                    }
                }
                out.push((x.0, gx));
            }
            if rga {
                let mut dgamma = Array1::<S>::zeros(c);
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        for i in base..base + h * w {
                            dgamma[ci] =
                                dgamma[ci] + gs[i] * (xsl[i] - mean[ci]) * inv_std[ci];
                        }
                    }
                }
                out.push((gamma.0, dgamma.into_dyn()));
            }
            if rbe {
                let mut dbeta = Array1::<S>::zeros(c);
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        for i in base..base + h * w {
                            dbeta[ci] = dbeta[ci] + gs[i];
                        }
                    }
                }
                out.push((beta.0, dbeta.into_dyn()));
            }
            out
        }))
    } else {
        None
    };
    tape.push(out, rg, backward)
}

/// Group normalization over (C/G, H, W) per (sample, group), with per-channel
/// affine parameters.
pub fn group_norm<S: Scalar>(
    tape: &Tape<S>,
    x: Var,
    gamma: Var,
    beta: Var,
    groups: usize,
    eps: f64,
) -> Var {
    let xv = tape.value(x);
    let gv = tape.value(gamma);
    let bv = tape.value(beta);
    let xs = xv.shape().to_vec();
    assert_eq!(xs.len(), 4, "group_norm: x must be 4-d");
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    assert!(groups > 0 && c % groups == 0, "group_norm: channels {c} not divisible by groups {groups}");
    assert_eq!(gv.shape(), [c], "group_norm: gamma shape");
    assert_eq!(bv.shape(), [c], "group_norm: beta shape");
    let cg = c / groups;
    let m = cg * h * w;
    let eps_s = S::from_f64(eps);

    let xsl = xv.as_slice().expect("standard layout");
    let mut inv_std = Array2::<S>::zeros((n, groups));
    let mut xhat = ArrayD::<S>::zeros(IxDyn(&xs));
    let mut out = ArrayD::<S>::zeros(IxDyn(&xs));
    {
        let xh = xhat.as_slice_mut().unwrap();
        let o = out.as_slice_mut().unwrap();
        let g1 = gv.as_slice().unwrap();
        let b1 = bv.as_slice().unwrap();
        for ni in 0..n {
            for gi in 0..groups {
                let start = (ni * c + gi * cg) * h * w;
                let (mu, var) = norm_stats(&xsl[start..start + m]);
                let is = S::one() / (var + eps_s).sqrt();
                inv_std[[ni, gi]] = is;
                for cc in 0..cg {
                    let ci = gi * cg + cc;
                    let base = (ni * c + ci) * h * w;
                    for i in base..base + h * w {
                        let xh_v = (xsl[i] - mu) * is;
                        xh[i] = xh_v;
                        o[i] = g1[ci] * xh_v + b1[ci];
                    }
                }
            }
        }
    }

    let rx = tape.requires_grad(x);
    let rga = tape.requires_grad(gamma);
    let rbe = tape.requires_grad(beta);
    let rg = rx || rga || rbe;
    let backward: Option<BackwardFn<S>> = if rg {
        let xhat = Arc::new(xhat);
        let gv = Arc::clone(&gv);
        Some(Box::new(move |g| {
            let gs = g.as_slice().expect("standard layout");
            let xh = xhat.as_slice().unwrap();
            let g1 = gv.as_slice().unwrap();
            let mf = S::from_f64(m as f64);
            let mut out = Vec::new();
            if rga || rbe {
                let mut dgamma = Array1::<S>::zeros(c);
                let mut dbeta = Array1::<S>::zeros(c);
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        for i in base..base + h * w {
                            dgamma[ci] = dgamma[ci] + gs[i] * xh[i];
                            dbeta[ci] = dbeta[ci] + gs[i];
                        }
                    }
                }
                if rga {
                    out.push((gamma.0, dgamma.into_dyn()));
                }
                if rbe {
                    out.push((beta.0, dbeta.into_dyn()));
                }
            }
            if rx {
                let mut gx = ArrayD::<S>::zeros(g.raw_dim());
                let gxs = gx.as_slice_mut().unwrap();
                for ni in 0..n {
                    for gi in 0..groups {
                        // dxhat = g * gamma; reduce within the group, then
                        // apply the standard normalization backward formula.
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for cc in 0..cg {
                            let ci = gi * cg + cc;
                            let base = (ni * c + ci) * h * w;
                            for i in base..base + h * w {
                                let dxh = gs[i] * g1[ci];
                                s1 = s1 + dxh;
                                s2 = s2 + dxh * xh[i];
                            }
                        }
                        let is = inv_std[[ni, gi]];
                        for cc in 0..cg {
                            let ci = gi * cg + cc;
                            let base = (ni * c + ci) * h * w;
                            for i in base..base + h * w {
                                let dxh = gs[i] * g1[ci];
                                gxs[i] = is / mf * (mf * dxh - s1 - xh[i] * s2);
                            }
                        }
                    }
                }
                out.push((x.0, gx));
            }
            out
        }))
    } else {
        None
    };
    tape.push(out, rg, backward)
}
