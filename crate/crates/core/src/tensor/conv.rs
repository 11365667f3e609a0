//! Convolution, pooling, resizing, and batched matmul.
//!
//! `conv2d` lowers to im2col + GEMM. The backward pass recomputes the im2col
//! buffer instead of storing one per sample, trading a little compute for a
//! big activation-memory saving. Batched matmul loops `general_mat_mul` over
//! the leading axis, which is plenty for the small attention grids used here.

use super::{BackwardFn, Scalar, Tape, Var};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayD, Axis, Ix3, IxDyn};
use std::sync::Arc;

fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    assert!(input + 2 * padding >= kernel, "conv: kernel larger than padded input");
    (input + 2 * padding - kernel) / stride + 1
}

/// Fills `col [C*KH*KW, OH*OW]` from one sample's channel block
/// `x [C, H, W]` (given as a flat standard-layout slice).
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col: &mut Array2<S>,
) {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    debug_assert_eq!(col.dim(), (c * kh * kw, oh * ow));
    let cs = col.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let row_base = row * oh * ow;
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - pad as isize;
                    let out_base = row_base + oi * ow;
                    if ih < 0 || ih >= h as isize {
                        cs[out_base..out_base + ow].iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let in_base = ci * h * w + ih as usize * w;
                    for oj in 0..ow {
                        let iw = (oj * stride + kj) as isize - pad as isize;
                        cs[out_base + oj] = if iw < 0 || iw >= w as isize {
                            S::zero()
                        } else {
                            x[in_base + iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add transpose of [`im2col`]: accumulates `col` gradients back
/// into the input gradient block `dx [C, H, W]`.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    col: &Array2<S>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut [S],
) {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let cs = col.as_slice().unwrap();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let row_base = row * oh * ow;
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let in_base = ci * h * w + ih as usize * w;
                    let out_base = row_base + oi * ow;
                    for oj in 0..ow {
                        let iw = (oj * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            let idx = in_base + iw as usize;
                            dx[idx] = dx[idx] + cs[out_base + oj];
                        }
                    }
                }
            }
        }
    }
}

/// 2-d convolution: `x [N, Cin, H, W]`, `w [Cout, Cin/groups, KH, KW]`,
/// optional `b [Cout]`. Same stride and padding on both axes.
pub fn conv2d<S: Scalar>(
    tape: &Tape<S>,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Var {
    let xv = tape.value(x);
    let wv = tape.value(w);
    let xs = xv.shape().to_vec();
    let ws = wv.shape().to_vec();
    assert_eq!(xs.len(), 4, "conv2d: x must be 4-d");
    assert_eq!(ws.len(), 4, "conv2d: w must be 4-d");
    let (n, cin, h, win) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert!(groups > 0 && cin % groups == 0 && cout % groups == 0, "conv2d: bad groups");
    assert_eq!(cin_g, cin / groups, "conv2d: weight channel mismatch");
    assert!(stride > 0, "conv2d: stride must be positive");
    let oh = conv_out_len(h, kh, stride, padding);
    let ow = conv_out_len(win, kw, stride, padding);
    let cout_g = cout / groups;
    let fast_1x1 = kh == 1 && kw == 1 && stride == 1 && padding == 0;

    let mut out = ArrayD::<S>::zeros(IxDyn(&[n, cout, oh, ow]));
    {
        let xsl = xv.as_slice().expect("standard layout");
        let wsl = wv.as_slice().unwrap();
        let osl = out.as_slice_mut().unwrap();
        let mut col = if fast_1x1 {
            Array2::<S>::zeros((0, 0))
        } else {
            Array2::<S>::zeros((cin_g * kh * kw, oh * ow))
        };
        for ni in 0..n {
            for gi in 0..groups {
                let w_g = Array2::from_shape_vec(
                    (cout_g, cin_g * kh * kw),
                    wsl[gi * cout_g * cin_g * kh * kw..(gi + 1) * cout_g * cin_g * kh * kw]
                        .to_vec(),
                )
                .unwrap();
                let x_off = (ni * cin + gi * cin_g) * h * win;
                let o_off = (ni * cout + gi * cout_g) * oh * ow;
                let mut o_g = ndarray::ArrayViewMut2::from_shape(
                    (cout_g, oh * ow),
                    &mut osl[o_off..o_off + cout_g * oh * ow],
                )
                .unwrap();
                if fast_1x1 {
                    let x_g = ndarray::ArrayView2::from_shape(
                        (cin_g, h * win),
                        &xsl[x_off..x_off + cin_g * h * win],
                    )
                    .unwrap();
                    general_mat_mul(S::one(), &w_g, &x_g, S::zero(), &mut o_g);
                } else {
                    im2col(
                        &xsl[x_off..x_off + cin_g * h * win],
                        cin_g,
                        h,
                        win,
                        kh,
                        kw,
                        stride,
                        padding,
                        &mut col,
                    );
                    general_mat_mul(S::one(), &w_g, &col, S::zero(), &mut o_g);
                }
            }
        }
        if let Some(bvar) = b {
            let bv = tape.value(bvar);
            assert_eq!(bv.shape(), [cout], "conv2d: bias shape");
            let bsl = bv.as_slice().unwrap();
            for ni in 0..n {
                for co in 0..cout {
                    let base = (ni * cout + co) * oh * ow;
                    let bias = bsl[co];
                    for v in &mut osl[base..base + oh * ow] {
                        *v = *v + bias;
                    }
                }
            }
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
            let gsl = g.as_slice().expect("standard layout");
            let xsl = xv.as_slice().unwrap();
            let wsl = wv.as_slice().unwrap();
            let mut out = Vec::new();
            let mut dx = if rx { vec![S::zero(); n * cin * h * win] } else { Vec::new() };
            let mut dw = if rw { vec![S::zero(); cout * cin_g * kh * kw] } else { Vec::new() };
            let mut col = if fast_1x1 {
                Array2::<S>::zeros((0, 0))
            } else {
                Array2::<S>::zeros((cin_g * kh * kw, oh * ow))
            };
            let mut col_grad = col.clone();
            for ni in 0..n {
                for gi in 0..groups {
                    let w_range =
                        gi * cout_g * cin_g * kh * kw..(gi + 1) * cout_g * cin_g * kh * kw;
                    let x_off = (ni * cin + gi * cin_g) * h * win;
                    let o_off = (ni * cout + gi * cout_g) * oh * ow;
                    let g_g = ndarray::ArrayView2::from_shape(
                        (cout_g, oh * ow),
                        &gsl[o_off..o_off + cout_g * oh * ow],
                    )
                    .unwrap();
                    if fast_1x1 {
                        let x_g = ndarray::ArrayView2::from_shape(
                            (cin_g, h * win),
                            &xsl[x_off..x_off + cin_g * h * win],
                        )
                        .unwrap();
                        if rw {
                            let mut dw_g = ndarray::ArrayViewMut2::from_shape(
                                (cout_g, cin_g),
                                &mut dw[w_range.clone()],
                            )
                            .unwrap();
                            general_mat_mul(S::one(), &g_g, &x_g.t(), S::one(), &mut dw_g);
                        }
                        if rx {
                            let w_g = ndarray::ArrayView2::from_shape(
                                (cout_g, cin_g),
                                &wsl[w_range],
                            )
                            .unwrap();
                            let mut dx_g = ndarray::ArrayViewMut2::from_shape(
                                (cin_g, h * win),
                                &mut dx[x_off..x_off + cin_g * h * win],
                            )
                            .unwrap();
                            general_mat_mul(S::one(), &w_g.t(), &g_g, S::one(), &mut dx_g);
                        }
                    } else {
                        if rw {
                            im2col(
                                &xsl[x_off..x_off + cin_g * h * win],
                                cin_g,
                                h,
                                win,
                                kh,
                                kw,
                                stride,
                                padding,
                                &mut col,
                            );
                            let mut dw_g = ndarray::ArrayViewMut2::from_shape(
                                (cout_g, cin_g * kh * kw),
                                &mut dw[w_range.clone()],
                            )
                            .unwrap();
                            general_mat_mul(S::one(), &g_g, &col.t(), S::one(), &mut dw_g);
                        }
                        if rx {
                            let w_g = ndarray::ArrayView2::from_shape(
                                (cout_g, cin_g * kh * kw),
                                &wsl[w_range],
                            )
                            .unwrap();
                            general_mat_mul(S::one(), &w_g.t(), &g_g, S::zero(), &mut col_grad);
                            col2im(
                                &col_grad,
                                cin_g,
                                h,
                                win,
                                kh,
                                kw,
                                stride,
                                padding,
                                &mut dx[x_off..x_off + cin_g * h * win],
                            );
                        }
                    }
                }
            }
            if rx {
                out.push((
                    x.0,
                    ArrayD::from_shape_vec(IxDyn(&[n, cin, h, win]), dx).unwrap(),
                ));
            }
            if rw {
                out.push((
                    w.0,
                    ArrayD::from_shape_vec(IxDyn(&[cout, cin_g, kh, kw]), dw).unwrap(),
                ));
            }
            if rb {
                let mut db = vec![S::zero(); cout];
                for ni in 0..n {
                    for co in 0..cout {
                        let base = (ni * cout + co) * oh * ow;
                        db[co] = db[co] + gsl[base..base + oh * ow].iter().copied().sum::<S>();
                    }
                }
                out.push((
                    b.unwrap().0,
                    ArrayD::from_shape_vec(IxDyn(&[cout]), db).unwrap(),
                ));
            }
            out
        }))
    } else {
        None
    };
    tape.push(out, rg, backward)
}

/// 2x2 max pooling with stride 2. Spatial dims must be even.
pub fn max_pool2x2<S: Scalar>(tape: &Tape<S>, x: Var) -> Var {
    let xv = tape.value(x);
    let xs = xv.shape().to_vec();
    assert_eq!(xs.len(), 4, "max_pool2x2: x must be 4-d");
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2x2: odd spatial dims {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let xsl = xv.as_slice().expect("standard layout");
    let mut out = ArrayD::<S>::zeros(IxDyn(&[n, c, oh, ow]));
    let mut argmax = vec![0u32; n * c * oh * ow];
    {
        let osl = out.as_slice_mut().unwrap();
        for nc in 0..n * c {
            let in_base = nc * h * w;
            let out_base = nc * oh * ow;
            for oi in 0..oh {
                for oj in 0..ow {
                    let i0 = in_base + (2 * oi) * w + 2 * oj;
                    let cand = [i0, i0 + 1, i0 + w, i0 + w + 1];
                    let mut best = cand[0];
                    for &idx in &cand[1..] {
                        if xsl[idx] > xsl[best] {
                            best = idx;
                        }
                    }
                    osl[out_base + oi * ow + oj] = xsl[best];
                    argmax[out_base + oi * ow + oj] = best as u32;
                }
            }
        }
    }
    let rg = tape.requires_grad(x);
    let backward: Option<BackwardFn<S>> = if rg {
        Some(Box::new(move |g| {
            let gsl = g.as_slice().expect("standard layout");
            let mut dx = vec![S::zero(); n * c * h * w];
            for (gi, &src) in argmax.iter().enumerate() {
                dx[src as usize] = dx[src as usize] + gsl[gi];
            }
            vec![(x.0, ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())]
        }))
    } else {
        None
    };
    tape.push(out, rg, backward)
}

fn adaptive_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end)
        })
        .collect()
}

/// Adaptive average pooling to an `out_h x out_w` grid. Bin edges follow the
/// floor/ceil convention, so uneven splits overlap rather than drop pixels.
pub fn adaptive_avg_pool<S: Scalar>(tape: &Tape<S>, x: Var, out_h: usize, out_w: usize) -> Var {
    let xv = tape.value(x);
    let xs = xv.shape().to_vec();
    assert_eq!(xs.len(), 4, "adaptive_avg_pool: x must be 4-d");
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    assert!(out_h > 0 && out_w > 0 && out_h <= h && out_w <= w, "adaptive_avg_pool: bad target {out_h}x{out_w} for {h}x{w}");
    let rows = adaptive_bins(h, out_h);
    let cols = adaptive_bins(w, out_w);
    let xsl = xv.as_slice().expect("standard layout");
    let mut out = ArrayD::<S>::zeros(IxDyn(&[n, c, out_h, out_w]));
    {
        let osl = out.as_slice_mut().unwrap();
        for nc in 0..n * c {
            let in_base = nc * h * w;
            let out_base = nc * out_h * out_w;
            for (oi, &(r0, r1)) in rows.iter().enumerate() {
                for (oj, &(c0, c1)) in cols.iter().enumerate() {
                    let mut acc = S::zero();
                    for ri in r0..r1 {
                        let row = in_base + ri * w;
                        for ci in c0..c1 {
                            acc = acc + xsl[row + ci];
                        }
                    }
                    let count = S::from_f64(((r1 - r0) * (c1 - c0)) as f64);
                    osl[out_base + oi * out_w + oj] = acc / count;
                }
            }
        }
    }
    let rg = tape.requires_grad(x);
    let backward: Option<BackwardFn<S>> = if rg {
        let rows = rows.clone();
        let cols = cols.clone();
        Some(Box::new(move |g| {
            let gsl = g.as_slice().expect("standard layout");
            let mut dx = vec![S::zero(); n * c * h * w];
            for nc in 0..n * c {
                let in_base = nc * h * w;
                let out_base = nc * out_h * out_w;
                for (oi, &(r0, r1)) in rows.iter().enumerate() {
                    for (oj, &(c0, c1)) in cols.iter().enumerate() {
                        let count = S::from_f64(((r1 - r0) * (c1 - c0)) as f64);
                        let gv = gsl[out_base + oi * out_w + oj] / count;
                        for ri in r0..r1 {
                            let row = in_base + ri * w;
                            for ci in c0..c1 {
                                dx[row + ci] = dx[row + ci] + gv;
                            }
                        }
                    }
                }
            }
            vec![(x.0, ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())]
        }))
    } else {
        None
    };
    tape.push(out, rg, backward)
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample_nearest2x<S: Scalar>(tape: &Tape<S>, x: Var) -> Var {
    let xv = tape.value(x);
    let xs = xv.shape().to_vec();
    assert_eq!(xs.len(), 4, "upsample_nearest2x: x must be 4-d");
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let xsl = xv.as_slice().expect("standard layout");
    let mut out = ArrayD::<S>::zeros(IxDyn(&[n, c, oh, ow]));
    {
        let osl = out.as_slice_mut().unwrap();
        for nc in 0..n * c {
            let in_base = nc * h * w;
            let out_base = nc * oh * ow;
            for i in 0..h {
                for j in 0..w {
                    let v = xsl[in_base + i * w + j];
                    let o = out_base + (2 * i) * ow + 2 * j;
                    osl[o] = v;
                    osl[o + 1] = v;
                    osl[o + ow] = v;
                    osl[o + ow + 1] = v;
                }
            }
        }
    }
    let rg = tape.requires_grad(x);
    let backward: Option<BackwardFn<S>> = if rg {
        Some(Box::new(move |g| {
            let gsl = g.as_slice().expect("standard layout");
            let mut dx = vec![S::zero(); n * c * h * w];
            for nc in 0..n * c {
                let in_base = nc * h * w;
                let out_base = nc * oh * ow;
                for i in 0..h {
                    for j in 0..w {
                        let o = out_base + (2 * i) * ow + 2 * j;
                        dx[in_base + i * w + j] =
                            gsl[o] + gsl[o + 1] + gsl[o + ow] + gsl[o + ow + 1];
                    }
                }
            }
            vec![(x.0, ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())]
        }))
    } else {
        None
    };
    tape.push(out, rg, backward)
}

/// Per-axis source index/weight pairs for half-pixel-center bilinear
/// interpolation: `(i0, i1, w1)` with `value = (1-w1)*x[i0] + w1*x[i1]`.
fn bilinear_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize to `out_h x out_w` with half-pixel centers.
pub fn bilinear_resize<S: Scalar>(tape: &Tape<S>, x: Var, out_h: usize, out_w: usize) -> Var {
    let xv = tape.value(x);
    let xs = xv.shape().to_vec();
    assert_eq!(xs.len(), 4, "bilinear_resize: x must be 4-d");
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    assert!(out_h > 0 && out_w > 0, "bilinear_resize: empty target");
    let rows = bilinear_axis(h, out_h);
    let cols = bilinear_axis(w, out_w);
    let xsl = xv.as_slice().expect("standard layout");
    let mut out = ArrayD::<S>::zeros(IxDyn(&[n, c, out_h, out_w]));
    {
        let osl = out.as_slice_mut().unwrap();
        for nc in 0..n * c {
            let in_base = nc * h * w;
            let out_base = nc * out_h * out_w;
            for (oi, &(r0, r1, wr)) in rows.iter().enumerate() {
                let wr1 = S::from_f64(wr);
                let wr0 = S::from_f64(1.0 - wr);
                for (oj, &(c0, c1, wc)) in cols.iter().enumerate() {
                    let wc1 = S::from_f64(wc);
                    let wc0 = S::from_f64(1.0 - wc);
                    let v = wr0 * wc0 * xsl[in_base + r0 * w + c0]
                        + wr0 * wc1 * xsl[in_base + r0 * w + c1]
                        + wr1 * wc0 * xsl[in_base + r1 * w + c0]
                        + wr1 * wc1 * xsl[in_base + r1 * w + c1];
                    osl[out_base + oi * out_w + oj] = v;
                }
            }
        }
    }
    let rg = tape.requires_grad(x);
    let backward: Option<BackwardFn<S>> = if rg {
        let rows = rows.clone();
        let cols = cols.clone();
        Some(Box::new(move |g| {
            let gsl = g.as_slice().expect("standard layout");
            let mut dx = vec![S::zero(); n * c * h * w];
            for nc in 0..n * c {
                let in_base = nc * h * w;
                let out_base = nc * out_h * out_w;
                for (oi, &(r0, r1, wr)) in rows.iter().enumerate() {
                    let wr1 = S::from_f64(wr);
                    let wr0 = S::from_f64(1.0 - wr);
                    for (oj, &(c0, c1, wc)) in cols.iter().enumerate() {
                        let wc1 = S::from_f64(wc);
                        let wc0 = S::from_f64(1.0 - wc);
                        let gv = gsl[out_base + oi * out_w + oj];
                        dx[in_base + r0 * w + c0] = dx[in_base + r0 * w + c0] + wr0 * wc0 * gv;
                        dx[in_base + r0 * w + c1] = dx[in_base + r0 * w + c1] + wr0 * wc1 * gv;
                        dx[in_base + r1 * w + c0] = dx[in_base + r1 * w + c0] + wr1 * wc0 * gv;
                        dx[in_base + r1 * w + c1] = dx[in_base + r1 * w + c1] + wr1 * wc1 * gv;
                    }
                }
            }
            vec![(x.0, ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())]
        }))
    } else {
        None
    };
    tape.push(out, rg, backward)
}

fn bmm_arrays<S: Scalar>(a: &ArrayD<S>, b: &ArrayD<S>, ta: bool, tb: bool) -> ArrayD<S> {
    let a3 = a.view().into_dimensionality::<Ix3>().expect("bmm: a must be 3-d");
    let b3 = b.view().into_dimensionality::<Ix3>().expect("bmm: b must be 3-d");
    let batch = a3.dim().0;
    assert_eq!(batch, b3.dim().0, "bmm: batch mismatch");
    let (m, k) = if ta { (a3.dim().2, a3.dim().1) } else { (a3.dim().1, a3.dim().2) };
    let (kb, nn) = if tb { (b3.dim().2, b3.dim().1) } else { (b3.dim().1, b3.dim().2) };
    assert_eq!(k, kb, "bmm: inner dim mismatch");
    let mut out = Array3::<S>::zeros((batch, m, nn));
    for i in 0..batch {
        let av = a3.index_axis(Axis(0), i);
        let bv = b3.index_axis(Axis(0), i);
        let mut ov = out.index_axis_mut(Axis(0), i);
        match (ta, tb) {
            (false, false) => general_mat_mul(S::one(), &av, &bv, S::zero(), &mut ov),
            (true, false) => general_mat_mul(S::one(), &av.t(), &bv, S::zero(), &mut ov),
            (false, true) => general_mat_mul(S::one(), &av, &bv.t(), S::zero(), &mut ov),
            (true, true) => general_mat_mul(S::one(), &av.t(), &bv.t(), S::zero(), &mut ov),
        }
    }
    out.into_dyn()
}

fn transpose_batch<S: Scalar>(x: ArrayD<S>) -> ArrayD<S> {
    let x3 = x.into_dimensionality::<Ix3>().unwrap();
    x3.permuted_axes([0, 2, 1]).as_standard_layout().to_owned().into_dyn()
}

/// Batched matrix multiply over the leading axis:
/// `out[i] = op_a(a[i]) @ op_b(b[i])` where `op` transposes when the flag is
/// set.
pub fn bmm<S: Scalar>(tape: &Tape<S>, a: Var, b: Var, ta: bool, tb: bool) -> Var {
    let av = tape.value(a);
    let bv = tape.value(b);
    let out = bmm_arrays(&av, &bv, ta, tb);
    let (ra, rb) = (tape.requires_grad(a), tape.requires_grad(b));
    let rg = ra || rb;
    let backward: Option<BackwardFn<S>> = if rg {
        let av = Arc::clone(&av);
        let bv = Arc::clone(&bv);
        Some(Box::new(move |g| {
            let mut out = Vec::new();
            if ra {
                // dA_logical = G @ B_logical^T, transposed back if `ta`.
                let da = bmm_arrays(g, &bv, false, !tb);
                out.push((a.0, if ta { transpose_batch(da) } else { da }));
            }
            if rb {
                // dB_logical = A_logical^T @ G, transposed back if `tb`.
                let db = bmm_arrays(&av, g, !ta, false);
                out.push((b.0, if tb { transpose_batch(db) } else { db }));
            }
            out
        }))
    } else {
        None
    };
    tape.push(out, rg, backward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::finite_difference_grad;
    use crate::tensor::ops::{mul, sum_all};
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::sync::Arc;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| StandardNormal.sample(&mut rng))
    }

    /// Direct convolution by definition, for checking the GEMM path.
    fn conv2d_naive(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        b: Option<&ArrayD<f64>>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> ArrayD<f64> {
        let (n, h, win) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (win + 2 * pad - kw) / stride + 1;
        let cout_g = cout / groups;
        let mut out = ArrayD::zeros(IxDyn(&[n, cout, oh, ow]));
        for ni in 0..n {
            for co in 0..cout {
                let gi = co / cout_g;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = b.map(|bb| bb[[co]]).unwrap_or(0.0);
                        for ci in 0..cin_g {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ih = (oi * stride + ki) as isize - pad as isize;
                                    let iw = (oj * stride + kj) as isize - pad as isize;
                                    if ih >= 0
                                        && iw >= 0
                                        && (ih as usize) < h
                                        && (iw as usize) < win
                                    {
                                        acc += x[[
                                            ni,
                                            gi * cin_g + ci,
                                            ih as usize,
                                            iw as usize,
                                        ]] * w[[co, ci, ki, kj]];
                                    }
                                }
                            }
                        }
                        out[[ni, co, oi, oj]] = acc;
                    }
                }
            }
        }
        out
    }

    fn check_conv_case(
        xs: &[usize],
        ws: &[usize],
        stride: usize,
        pad: usize,
        groups: usize,
        seed: u64,
    ) {
        let x0 = randn(xs, seed);
        let w0 = randn(ws, seed + 1);
        let b0 = randn(&[ws[0]], seed + 2);
        let t = Tape::<f64>::new();
        let x = t.leaf(Arc::new(x0.clone()));
        let w = t.leaf(Arc::new(w0.clone()));
        let b = t.leaf(Arc::new(b0.clone()));
        let y = conv2d(&t, x, w, Some(b), stride, pad, groups);
        let expect = conv2d_naive(&x0, &w0, Some(&b0), stride, pad, groups);
        let yv = t.value(y);
        assert_eq!(yv.shape(), expect.shape());
        for (a, e) in yv.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-10, "conv forward mismatch: {a} vs {e}");
        }
        // Weighted-sum loss exercises every output position independently.
        let probe = randn(yv.shape(), seed + 3);
        let pv = t.constant(probe.clone());
        let loss = sum_all(&t, mul(&t, y, pv));
        let grads = t.backward(loss);
        let eval = |xp: &ArrayD<f64>, wp: &ArrayD<f64>, bp: &ArrayD<f64>| {
            let o = conv2d_naive(xp, wp, Some(bp), stride, pad, groups);
            o.iter().zip(probe.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        let nx = finite_difference_grad(|p| eval(p, &w0, &b0), &x0, 1e-5);
        let nw = finite_difference_grad(|p| eval(&x0, p, &b0), &w0, 1e-5);
        let nb = finite_difference_grad(|p| eval(&x0, &w0, p), &b0, 1e-5);
        for (a, n) in grads.get(x).unwrap().iter().zip(nx.iter()) {
            assert!((a - n).abs() < 1e-5, "conv dx: {a} vs {n}");
        }
        for (a, n) in grads.get(w).unwrap().iter().zip(nw.iter()) {
            assert!((a - n).abs() < 1e-5, "conv dw: {a} vs {n}");
        }
        for (a, n) in grads.get(b).unwrap().iter().zip(nb.iter()) {
            assert!((a - n).abs() < 1e-5, "conv db: {a} vs {n}");
        }
    }

    #[test]
    fn conv2d_matches_naive_3x3() {
        check_conv_case(&[2, 3, 5, 6], &[4, 3, 3, 3], 1, 1, 1, 30);
    }

    #[test]
    fn conv2d_matches_naive_strided() {
        check_conv_case(&[1, 2, 6, 6], &[3, 2, 3, 3], 2, 1, 1, 40);
    }

    #[test]
    fn conv2d_matches_naive_grouped() {
        check_conv_case(&[2, 4, 4, 4], &[6, 2, 3, 3], 1, 1, 2, 50);
    }

    #[test]
    fn conv2d_matches_naive_depthwise() {
        check_conv_case(&[1, 4, 5, 5], &[4, 1, 3, 3], 1, 1, 4, 60);
    }

    #[test]
    fn conv2d_1x1_fast_path_matches_general() {
        check_conv_case(&[2, 5, 4, 4], &[3, 5, 1, 1], 1, 0, 1, 70);
        // Same shapes through the padded general path for comparison.
        let x0 = randn(&[2, 5, 4, 4], 71);
        let w0 = randn(&[3, 5, 1, 1], 72);
        let t = Tape::<f64>::new();
        let x = t.constant(x0.clone());
        let w = t.constant(w0.clone());
        let fast = t.value(conv2d(&t, x, w, None, 1, 0, 1));
        let slow = conv2d_naive(&x0, &w0, None, 1, 0, 1);
        for (a, e) in fast.iter().zip(slow.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_takes_block_maxima_and_routes_grads() {
        let x0 = randn(&[2, 3, 4, 6], 80);
        let t = Tape::<f64>::new();
        let x = t.leaf(Arc::new(x0.clone()));
        let y = max_pool2x2(&t, x);
        let yv = t.value(y);
        assert_eq!(yv.shape(), &[2, 3, 2, 3]);
        for n in 0..2 {
            for c in 0..3 {
                for i in 0..2 {
                    for j in 0..3 {
                        let m = x0[[n, c, 2 * i, 2 * j]]
                            .max(x0[[n, c, 2 * i, 2 * j + 1]])
                            .max(x0[[n, c, 2 * i + 1, 2 * j]])
                            .max(x0[[n, c, 2 * i + 1, 2 * j + 1]]);
                        assert_eq!(yv[[n, c, i, j]], m);
                    }
                }
            }
        }
        let probe = randn(&[2, 3, 2, 3], 81);
        let pv = t.constant(probe.clone());
        let loss = sum_all(&t, mul(&t, y, pv));
        let grads = t.backward(loss);
        let numeric = finite_difference_grad(
            |xp| {
                let t = Tape::<f64>::new();
                let x = t.constant(xp.clone());
                let y = max_pool2x2(&t, x);
                t.value(y).iter().zip(probe.iter()).map(|(a, b)| a * b).sum()
            },
            &x0,
            1e-6,
        );
        for (a, n) in grads.get(x).unwrap().iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-5);
        }
    }

    #[test]
    fn adaptive_pool_bins_cover_input() {
        assert_eq!(adaptive_bins(6, 3), vec![(0, 2), (2, 4), (4, 6)]);
        assert_eq!(adaptive_bins(5, 3), vec![(0, 2), (1, 4), (3, 5)]);
        assert_eq!(adaptive_bins(4, 1), vec![(0, 4)]);
        let x0 = randn(&[1, 2, 5, 7], 90);
        let t = Tape::<f64>::new();
        let x = t.leaf(Arc::new(x0.clone()));
        let y = adaptive_avg_pool(&t, x, 3, 2);
        // Global pool equals plain mean.
        let g = adaptive_avg_pool(&t, x, 1, 1);
        let gv = t.value(g);
        for c in 0..2 {
            let mean: f64 =
                (0..5).flat_map(|i| (0..7).map(move |j| (i, j))).map(|(i, j)| x0[[0, c, i, j]]).sum::<f64>()
                    / 35.0;
            assert!((gv[[0, c, 0, 0]] - mean).abs() < 1e-12);
        }
        let probe = randn(&[1, 2, 3, 2], 91);
        let pv = t.constant(probe.clone());
        let loss = sum_all(&t, mul(&t, y, pv));
        let grads = t.backward(loss);
        let numeric = finite_difference_grad(
            |xp| {
                let t = Tape::<f64>::new();
                let x = t.constant(xp.clone());
                let y = adaptive_avg_pool(&t, x, 3, 2);
                t.value(y).iter().zip(probe.iter()).map(|(a, b)| a * b).sum()
            },
            &x0,
            1e-6,
        );
        for (a, n) in grads.get(x).unwrap().iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_nearest_repeats_and_sums_back() {
        let x0 = randn(&[1, 2, 2, 3], 100);
        let t = Tape::<f64>::new();
        let x = t.leaf(Arc::new(x0.clone()));
        let y = upsample_nearest2x(&t, x);
        let yv = t.value(y);
        assert_eq!(yv.shape(), &[1, 2, 4, 6]);
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..6 {
                    assert_eq!(yv[[0, c, i, j]], x0[[0, c, i / 2, j / 2]]);
                }
            }
        }
        let grads = t.backward(sum_all(&t, y));
        for g in grads.get(x).unwrap().iter() {
            assert!((g - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_identity_and_known_blend() {
        let x0 = randn(&[1, 1, 3, 4], 110);
        let t = Tape::<f64>::new();
        let x = t.leaf(Arc::new(x0.clone()));
        let same = t.value(bilinear_resize(&t, x, 3, 4));
        for (a, e) in same.iter().zip(x0.iter()) {
            assert!((a - e).abs() < 1e-12, "identity resize changed values");
        }
        // 2 -> 4 along one axis: interior samples blend 0.75/0.25.
        let line = ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 2]), vec![0.0, 1.0]).unwrap();
        let xl = t.constant(line);
        let up = t.value(bilinear_resize(&t, xl, 1, 4));
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (a, e) in up.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12, "blend mismatch: {a} vs {e}");
        }
        let probe = randn(&[1, 1, 5, 7], 111);
        let pv = t.constant(probe.clone());
        let y = bilinear_resize(&t, x, 5, 7);
        let loss = sum_all(&t, mul(&t, y, pv));
        let grads = t.backward(loss);
        let numeric = finite_difference_grad(
            |xp| {
                let t = Tape::<f64>::new();
                let x = t.constant(xp.clone());
                let y = bilinear_resize(&t, x, 5, 7);
                t.value(y).iter().zip(probe.iter()).map(|(a, b)| a * b).sum()
            },
            &x0,
            1e-6,
        );
        for (a, n) in grads.get(x).unwrap().iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6);
        }
    }

    #[test]
    fn bmm_matches_naive_for_all_transpose_flags() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a_shape = if ta { [2, 4, 3] } else { [2, 3, 4] };
            let b_shape = if tb { [2, 5, 4] } else { [2, 4, 5] };
            let a0 = randn(&a_shape, 120 + ta as u64);
            let b0 = randn(&b_shape, 122 + tb as u64);
            let t = Tape::<f64>::new();
            let a = t.leaf(Arc::new(a0.clone()));
            let b = t.leaf(Arc::new(b0.clone()));
            let y = bmm(&t, a, b, ta, tb);
            let yv = t.value(y);
            assert_eq!(yv.shape(), &[2, 3, 5]);
            for bi in 0..2 {
                for i in 0..3 {
                    for j in 0..5 {
                        let mut acc = 0.0;
                        for k in 0..4 {
                            let av = if ta { a0[[bi, k, i]] } else { a0[[bi, i, k]] };
                            let bv = if tb { b0[[bi, j, k]] } else { b0[[bi, k, j]] };
                            acc += av * bv;
                        }
                        assert!((yv[[bi, i, j]] - acc).abs() < 1e-10);
                    }
                }
            }
            let probe = randn(&[2, 3, 5], 130);
            let pv = t.constant(probe.clone());
            let loss = sum_all(&t, mul(&t, y, pv));
            let grads = t.backward(loss);
            let eval = |ap: &ArrayD<f64>, bp: &ArrayD<f64>| {
                let t = Tape::<f64>::new();
                let a = t.constant(ap.clone());
                let b = t.constant(bp.clone());
                let y = bmm(&t, a, b, ta, tb);
                t.value(y).iter().zip(probe.iter()).map(|(x, p)| x * p).sum::<f64>()
            };
            let na = finite_difference_grad(|p| eval(p, &b0), &a0, 1e-5);
            let nb = finite_difference_grad(|p| eval(&a0, p), &b0, 1e-5);
            for (x, n) in grads.get(a).unwrap().iter().zip(na.iter()) {
                assert!((x - n).abs() < 1e-5, "bmm da ({ta},{tb})");
            }
            for (x, n) in grads.get(b).unwrap().iter().zip(nb.iter()) {
                assert!((x - n).abs() < 1e-5, "bmm db ({ta},{tb})");
            }
        }
    }
}
