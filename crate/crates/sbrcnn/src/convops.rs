//! Spatial ops: convolution (im2col + GEMM), group normalization, pooling,
//! bilinear upsampling, and RoI align. All operate on NCHW f64 tensors and
//! register their backward passes on the [`Graph`].

use crate::autograd::{Graph, TensorId};
use crate::geometry::BoxF;
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2dSpec {
    pub fn unit(pad: (usize, usize)) -> Self {
        Conv2dSpec { stride: (1, 1), pad }
    }
}

fn conv_out_size(h: usize, w: usize, kh: usize, kw: usize, spec: &Conv2dSpec) -> (usize, usize) {
    let oh = (h + 2 * spec.pad.0).checked_sub(kh).expect("kernel larger than padded input") / spec.stride.0 + 1;
    let ow = (w + 2 * spec.pad.1).checked_sub(kw).expect("kernel larger than padded input") / spec.stride.1 + 1;
    (oh, ow)
}

/// Lay out every receptive field of the batch as one column matrix:
/// rows = in_ch*kh*kw, cols = n*oh*ow.
fn im2col(
    x: &ArrayD<f64>,
    kh: usize,
    kw: usize,
    spec: &Conv2dSpec,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let xs = x.as_slice().expect("im2col: non-contiguous input");
    let rows = c * kh * kw;
    let per_item = oh * ow;
    let mut cols = Array2::<f64>::zeros((rows, n * per_item));
    {
        let cs = cols.as_slice_mut().unwrap();
        let total_cols = n * per_item;
        // parallel over rows: each row writes a disjoint slice, deterministic
        cs.par_chunks_mut(total_cols).enumerate().for_each(|(row, dst)| {
            let ci = row / (kh * kw);
            let ky = (row / kw) % kh;
            let kx = row % kw;
            for item in 0..n {
                let base_in = (item * c + ci) * h * w;
                let base_out = item * per_item;
                for oy in 0..oh {
                    let iy = (oy * spec.stride.0 + ky) as isize - spec.pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row_in = base_in + iy as usize * w;
                    let row_out = base_out + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * spec.stride.1 + kx) as isize - spec.pad.1 as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[row_out + ox] = xs[row_in + ix as usize];
                    }
                }
            }
        });
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &Conv2dSpec,
    oh: usize,
    ow: usize,
) -> ArrayD<f64> {
    let per_item = oh * ow;
    let mut dx = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, w]));
    let dxs = dx.as_slice_mut().unwrap();
    let dc = dcols.as_slice().unwrap();
    let total_cols = n * per_item;
    // parallel over batch items: each writes a disjoint n-slice
    dxs.par_chunks_mut(c * h * w).enumerate().for_each(|(item, dst)| {
        for row in 0..c * kh * kw {
            let ci = row / (kh * kw);
            let ky = (row / kw) % kh;
            let kx = row % kw;
            let src_base = row * total_cols + item * per_item;
            for oy in 0..oh {
                let iy = (oy * spec.stride.0 + ky) as isize - spec.pad.0 as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for ox in 0..ow {
                    let ix = (ox * spec.stride.1 + kx) as isize - spec.pad.1 as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    dst[(ci * h + iy as usize) * w + ix as usize] += dc[src_base + oy * ow + ox];
                }
            }
        }
    });
    dx
}

fn gemm(a: &ndarray::ArrayView2<f64>, b: &ndarray::ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    ndarray::linalg::general_mat_mul(1.0, a, b, 0.0, &mut out);
    out
}

/// 2-d convolution, NCHW input, OIHW weights, optional bias.
pub fn conv2d(
    g: &mut Graph,
    x: TensorId,
    w: TensorId,
    bias: Option<TensorId>,
    spec: Conv2dSpec,
) -> TensorId {
    let xv = g.value(x);
    let wv = g.value(w);
    assert_eq!(xv.ndim(), 4, "conv2d input must be NCHW");
    assert_eq!(wv.ndim(), 4, "conv2d weight must be OIHW");
    let (n, c, h, ww) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (o, ci, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    assert_eq!(c, ci, "conv2d channel mismatch");
    let (oh, ow) = conv_out_size(h, ww, kh, kw, &spec);

    let cols = im2col(xv, kh, kw, &spec, oh, ow);
    let w_mat = crate::autograd::reshaped(wv, &[o, ci * kh * kw]);
    let w_mat2 = w_mat.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let y_mat = gemm(&w_mat2, &cols.view()); // o x (n*oh*ow)

    let per_item = oh * ow;
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, o, oh, ow]));
    {
        let os = out.as_slice_mut().unwrap();
        let ys = y_mat.as_slice().unwrap();
        for item in 0..n {
            for oc in 0..o {
                let src = oc * (n * per_item) + item * per_item;
                let dst = (item * o + oc) * per_item;
                os[dst..dst + per_item].copy_from_slice(&ys[src..src + per_item]);
            }
        }
    }
    if let Some(b) = bias {
        let bv = g.value(b);
        assert_eq!(bv.len(), o);
        let bs: Vec<f64> = bv.iter().cloned().collect();
        let os = out.as_slice_mut().unwrap();
        for item in 0..n {
            for (oc, bval) in bs.iter().enumerate() {
                let dst = (item * o + oc) * per_item;
                for v in &mut os[dst..dst + per_item] {
                    *v += bval;
                }
            }
        }
    }

    let mut parents = vec![x, w];
    if let Some(b) = bias {
        parents.push(b);
    }
    let needs = g.any_needs_grad(&parents);
    g.push(
        out,
        needs,
        Some(Box::new(move |gr, og| {
            let xv = gr.value(x);
            let wv = gr.value(w);
            let (n, c, h, ww) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
            let (o, _, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
            let (oh, ow) = conv_out_size(h, ww, kh, kw, &spec);
            let per_item = oh * ow;

            // og is n x o x oh x ow; regroup as o x (n*oh*ow)
            let ogs = og.as_slice().unwrap();
            let mut dy_mat = Array2::<f64>::zeros((o, n * per_item));
            {
                let ds = dy_mat.as_slice_mut().unwrap();
                for item in 0..n {
                    for oc in 0..o {
                        let src = (item * o + oc) * per_item;
                        let dst = oc * (n * per_item) + item * per_item;
                        ds[dst..dst + per_item].copy_from_slice(&ogs[src..src + per_item]);
                    }
                }
            }

            let cols = im2col(xv, kh, kw, &spec, oh, ow);
            let dw_mat = gemm(&dy_mat.view(), &cols.t());
            let dw = crate::autograd::reshaped(&dw_mat.into_dyn(), &[o, c, kh, kw]);

            let w_mat = crate::autograd::reshaped(wv, &[o, c * kh * kw]);
            let w_mat2 = w_mat.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let dcols = gemm(&w_mat2.t(), &dy_mat.view());
            let dx = col2im(&dcols, n, c, h, ww, kh, kw, &spec, oh, ow);

            let mut grads = vec![(x, dx), (w, dw)];
            if let Some(b) = bias {
                let db = dy_mat.sum_axis(Axis(1));
                grads.push((b, db.into_dyn()));
            }
            grads
        })),
    )
}

/// Group normalization over NCHW with per-channel affine parameters.
pub fn group_norm(
    g: &mut Graph,
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    groups: usize,
    eps: f64,
) -> TensorId {
    let xv = g.value(x);
    assert_eq!(xv.ndim(), 4);
    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    assert_eq!(c % groups, 0, "channels must divide into groups");
    assert_eq!(g.value(gamma).len(), c);
    assert_eq!(g.value(beta).len(), c);
    let cpg = c / groups;
    let m = (cpg * h * w) as f64;

    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, w]));
    let mut stats = vec![(0.0f64, 0.0f64); n * groups]; // (mean, inv_std)
    {
        let xs = xv.as_slice().unwrap();
        let gam: Vec<f64> = g.value(gamma).iter().cloned().collect();
        let bet: Vec<f64> = g.value(beta).iter().cloned().collect();
        let os = out.as_slice_mut().unwrap();
        for item in 0..n {
            for grp in 0..groups {
                let start = (item * c + grp * cpg) * h * w;
                let end = start + cpg * h * w;
                let mean = xs[start..end].iter().sum::<f64>() / m;
                let var = xs[start..end].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let inv_std = 1.0 / (var + eps).sqrt();
                stats[item * groups + grp] = (mean, inv_std);
                for ci in 0..cpg {
                    let ch = grp * cpg + ci;
                    let base = (item * c + ch) * h * w;
                    for p in 0..h * w {
                        os[base + p] = (xs[base + p] - mean) * inv_std * gam[ch] + bet[ch];
                    }
                }
            }
        }
    }

    let needs = g.any_needs_grad(&[x, gamma, beta]);
    g.push(
        out,
        needs,
        Some(Box::new(move |gr, og| {
            let xv = gr.value(x);
            let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
            let cpg = c / groups;
            let m = (cpg * h * w) as f64;
            let xs = xv.as_slice().unwrap();
            let ogs = og.as_slice().unwrap();
            let gam: Vec<f64> = gr.value(gamma).iter().cloned().collect();

            let mut dx = ArrayD::<f64>::zeros(xv.raw_dim());
            let mut dgamma = ArrayD::<f64>::zeros(IxDyn(&[c]));
            let mut dbeta = ArrayD::<f64>::zeros(IxDyn(&[c]));
            let dxs = dx.as_slice_mut().unwrap();
            for item in 0..n {
                for grp in 0..groups {
                    let (mean, inv_std) = stats[item * groups + grp];
                    // first pass: accumulate the two reductions
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for ci in 0..cpg {
                        let ch = grp * cpg + ci;
                        let base = (item * c + ch) * h * w;
                        for p in 0..h * w {
                            let xhat = (xs[base + p] - mean) * inv_std;
                            let dy = ogs[base + p];
                            dgamma[ch] += dy * xhat;
                            dbeta[ch] += dy;
                            let dxhat = dy * gam[ch];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                    }
                    for ci in 0..cpg {
                        let ch = grp * cpg + ci;
                        let base = (item * c + ch) * h * w;
                        for p in 0..h * w {
                            let xhat = (xs[base + p] - mean) * inv_std;
                            let dxhat = ogs[base + p] * gam[ch];
                            dxs[base + p] =
                                inv_std * (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m);
                        }
                    }
                }
            }
            vec![(x, dx), (gamma, dgamma), (beta, dbeta)]
        })),
    )
}

/// 2x2 max pooling with stride 2 (input sides must be even).
pub fn max_pool2x2(g: &mut Graph, x: TensorId) -> TensorId {
    let xv = g.value(x);
    assert_eq!(xv.ndim(), 4);
    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2x2 needs even sides");
    let (oh, ow) = (h / 2, w / 2);
    let xs = xv.as_slice().unwrap();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, c, oh, ow]));
    let mut argmax = vec![0usize; n * c * oh * ow];
    {
        let os = out.as_slice_mut().unwrap();
        for nc in 0..n * c {
            let in_base = nc * h * w;
            let out_base = nc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dxp in 0..2 {
                            let idx = in_base + (oy * 2 + dy) * w + ox * 2 + dxp;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    os[out_base + oy * ow + ox] = best;
                    argmax[out_base + oy * ow + ox] = best_idx;
                }
            }
        }
    }
    let needs = g.needs_grad(x);
    g.push(
        out,
        needs,
        Some(Box::new(move |gr, og| {
            let mut dx = ArrayD::<f64>::zeros(gr.value(x).raw_dim());
            let dxs = dx.as_slice_mut().unwrap();
            for (flat, &src) in argmax.iter().enumerate() {
                dxs[src] += og.as_slice().unwrap()[flat];
            }
            vec![(x, dx)]
        })),
    )
}

/// Bilinear 2x upsampling (half-pixel centers), NCHW.
pub fn bilinear_up2x(g: &mut Graph, x: TensorId) -> TensorId {
    let xv = g.value(x);
    assert_eq!(xv.ndim(), 4);
    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (oh, ow) = (h * 2, w * 2);
    let weights_y = up2x_weights(h);
    let weights_x = up2x_weights(w);
    let xs = xv.as_slice().unwrap();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, c, oh, ow]));
    {
        let os = out.as_slice_mut().unwrap();
        for nc in 0..n * c {
            let in_base = nc * h * w;
            let out_base = nc * oh * ow;
            for oy in 0..oh {
                let (y0, y1, fy) = weights_y[oy];
                for ox in 0..ow {
                    let (x0, x1, fx) = weights_x[ox];
                    let v00 = xs[in_base + y0 * w + x0];
                    let v01 = xs[in_base + y0 * w + x1];
                    let v10 = xs[in_base + y1 * w + x0];
                    let v11 = xs[in_base + y1 * w + x1];
                    os[out_base + oy * ow + ox] = v00 * (1.0 - fy) * (1.0 - fx)
                        + v01 * (1.0 - fy) * fx
                        + v10 * fy * (1.0 - fx)
                        + v11 * fy * fx;
                }
            }
        }
    }
    let needs = g.needs_grad(x);
    g.push(
        out,
        needs,
        Some(Box::new(move |gr, og| {
            let xv = gr.value(x);
            let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
            let (oh, ow) = (h * 2, w * 2);
            let weights_y = up2x_weights(h);
            let weights_x = up2x_weights(w);
            let mut dx = ArrayD::<f64>::zeros(xv.raw_dim());
            let dxs = dx.as_slice_mut().unwrap();
            let ogs = og.as_slice().unwrap();
            for nc in 0..n * c {
                let in_base = nc * h * w;
                let out_base = nc * oh * ow;
                for oy in 0..oh {
                    let (y0, y1, fy) = weights_y[oy];
                    for ox in 0..ow {
                        let (x0, x1, fx) = weights_x[ox];
                        let d = ogs[out_base + oy * ow + ox];
                        dxs[in_base + y0 * w + x0] += d * (1.0 - fy) * (1.0 - fx);
                        dxs[in_base + y0 * w + x1] += d * (1.0 - fy) * fx;
                        dxs[in_base + y1 * w + x0] += d * fy * (1.0 - fx);
                        dxs[in_base + y1 * w + x1] += d * fy * fx;
                    }
                }
            }
            vec![(x, dx)]
        })),
    )
}

fn up2x_weights(size: usize) -> Vec<(usize, usize, f64)> {
    (0..size * 2)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let clamped = src.clamp(0.0, (size - 1) as f64);
            let lo = clamped.floor() as usize;
            let hi = (lo + 1).min(size - 1);
            (lo, hi, clamped - lo as f64)
        })
        .collect()
}

/// Nearest-neighbour 2x upsampling (used by the pyramid top-down path).
pub fn nearest_up2x(g: &mut Graph, x: TensorId) -> TensorId {
    let xv = g.value(x);
    assert_eq!(xv.ndim(), 4);
    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let xs = xv.as_slice().unwrap();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, c, h * 2, w * 2]));
    {
        let os = out.as_slice_mut().unwrap();
        for nc in 0..n * c {
            let in_base = nc * h * w;
            let out_base = nc * 4 * h * w;
            for oy in 0..h * 2 {
                for ox in 0..w * 2 {
                    os[out_base + oy * w * 2 + ox] = xs[in_base + (oy / 2) * w + ox / 2];
                }
            }
        }
    }
    let needs = g.needs_grad(x);
    g.push(
        out,
        needs,
        Some(Box::new(move |gr, og| {
            let xv = gr.value(x);
            let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
            let mut dx = ArrayD::<f64>::zeros(xv.raw_dim());
            let dxs = dx.as_slice_mut().unwrap();
            let ogs = og.as_slice().unwrap();
            for nc in 0..n * c {
                let in_base = nc * h * w;
                let out_base = nc * 4 * h * w;
                for oy in 0..h * 2 {
                    for ox in 0..w * 2 {
                        dxs[in_base + (oy / 2) * w + ox / 2] += ogs[out_base + oy * w * 2 + ox];
                    }
                }
            }
            vec![(x, dx)]
        })),
    )
}

/// RoI align on a single pyramid level. `feat` is `C x H x W`, boxes are in
/// image coordinates and get mapped by `spatial_scale` = 1/stride. Sample
/// points per bin axis = `sampling`, average-pooled. Boxes with non-positive
/// area yield all-zero features.
pub fn roi_align(
    g: &mut Graph,
    feat: TensorId,
    boxes: &[BoxF],
    spatial_scale: f64,
    out_size: usize,
    sampling: usize,
) -> TensorId {
    let fv = g.value(feat);
    assert_eq!(fv.ndim(), 3, "roi_align expects C x H x W");
    let (c, h, w) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
    let s = out_size;
    let nb = boxes.len();
    let samples = sample_points(boxes, spatial_scale, s, sampling, h, w);
    let fs = fv.as_slice().unwrap();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[nb, c, s, s]));
    {
        let os = out.as_slice_mut().unwrap();
        let inv = 1.0 / (sampling * sampling) as f64;
        os.par_chunks_mut(c * s * s). enumerate().for_each(|(bi, dst)| {
            for (bin, pts) in samples[bi].iter().enumerate() {
                for &(y0, x0, y1, x1, wy, wx) in pts {
                    let w00 = (1.0 - wy) * (1.0 - wx);
                    let w01 = (1.0 - wy) * wx;
                    let w10 = wy * (1.0 - wx);
                    let w11 = wy * wx;
                    for ci in 0..c {
                        let base = ci * h * w;
                        dst[ci * s * s + bin] += inv
                            * (fs[base + y0 * w + x0] * w00
                                + fs[base + y0 * w + x1] * w01
                                + fs[base + y1 * w + x0] * w10
                                + fs[base + y1 * w + x1] * w11);
                    }
                }
            }
        });
    }
    let needs = g.needs_grad(feat);
    g.push(
        out,
        needs,
        Some(Box::new(move |gr, og| {
            let fv = gr.value(feat);
            let (c, h, w) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
            let mut df = ArrayD::<f64>::zeros(fv.raw_dim());
            let dfs = df.as_slice_mut().unwrap();
            let ogs = og.as_slice().unwrap();
            let s2 = og.shape()[2] * og.shape()[3];
            let sside = og.shape()[2];
            let inv = 1.0 / (sampling * sampling) as f64;
            for (bi, bins) in samples.iter().enumerate() {
                for (bin, pts) in bins.iter().enumerate() {
                    for &(y0, x0, y1, x1, wy, wx) in pts {
                        let w00 = (1.0 - wy) * (1.0 - wx);
                        let w01 = (1.0 - wy) * wx;
                        let w10 = wy * (1.0 - wx);
                        let w11 = wy * wx;
                        for ci in 0..c {
                            let dv = ogs[(bi * c + ci) * s2 + bin] * inv;
                            let base = ci * h * w;
                            dfs[base + y0 * w + x0] += dv * w00;
                            dfs[base + y0 * w + x1] += dv * w01;
                            dfs[base + y1 * w + x0] += dv * w10;
                            dfs[base + y1 * w + x1] += dv * w11;
                        }
                    }
                }
            }
            let _ = sside;
            vec![(feat, df)]
        })),
    )
}

type BinSamples = Vec<(usize, usize, usize, usize, f64, f64)>;

/// Precompute bilinear sample corners/weights for every box and output bin.
/// Half-pixel aligned: image coordinate u maps to feature index u*scale - 0.5.
fn sample_points(
    boxes: &[BoxF],
    spatial_scale: f64,
    s: usize,
    sampling: usize,
    h: usize,
    w: usize,
) -> Vec<Vec<BinSamples>> {
    boxes
        .iter()
        .map(|b| {
            let mut bins: Vec<BinSamples> = vec![Vec::new(); s * s];
            if b.width() <= 0.0 || b.height() <= 0.0 {
                return bins;
            }
            let start_x = b.x1 * spatial_scale - 0.5;
            let start_y = b.y1 * spatial_scale - 0.5;
            let bin_w = (b.x2 - b.x1) * spatial_scale / s as f64;
            let bin_h = (b.y2 - b.y1) * spatial_scale / s as f64;
            for by in 0..s {
                for bx in 0..s {
                    let pts = &mut bins[by * s + bx];
                    for sy in 0..sampling {
                        let y = start_y + (by as f64 + (sy as f64 + 0.5) / sampling as f64) * bin_h * s as f64 / s as f64;
                        let y = start_y + by as f64 * bin_h + (sy as f64 + 0.5) / sampling as f64 * bin_h;
                        let _ = y;
                        let yy = start_y + by as f64 * bin_h + (sy as f64 + 0.5) / sampling as f64 * bin_h;
                        if yy < -1.0 || yy > h as f64 {
                            continue;
                        }
                        let yy = yy.clamp(0.0, (h - 1) as f64);
                        let y0 = yy.floor() as usize;
                        let y1 = (y0 + 1).min(h - 1);
                        let wy = yy - y0 as f64;
                        for sx in 0..sampling {
                            let xx = start_x + bx as f64 * bin_w + (sx as f64 + 0.5) / sampling as f64 * bin_w;
                            if xx < -1.0 || xx > w as f64 {
                                continue;
                            }
                            let xx = xx.clamp(0.0, (w - 1) as f64);
                            let x0 = xx.floor() as usize;
                            let x1 = (x0 + 1).min(w - 1);
                            let wx = xx - x0 as f64;
                            pts.push((y0, x0, y1, x1, wy, wx));
                        }
                    }
                }
            }
            bins
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{sum_all, Graph};
    use crate::gradcheck::check_scalar_fn;
    use ndarray::IxDyn;

    #[test]
    fn conv2d_shape_and_identity_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 3, 3]), (1..=9).map(|v| v as f64).collect())
                .unwrap(),
        );
        // 1x1 identity kernel
        let w = g.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0));
        let y = conv2d(&mut g, x, w, None, Conv2dSpec::unit((0, 0)));
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert_eq!(g.value(y)[[0, 0, 1, 1]], 5.0);
    }

    #[test]
    fn conv2d_gradcheck_stride_and_asym_pad() {
        check_scalar_fn(&[&[2, 2, 5, 4], &[3, 2, 3, 2], &[3]], |g, ids| {
            let y = conv2d(
                g,
                ids[0],
                ids[1],
                Some(ids[2]),
                Conv2dSpec { stride: (2, 1), pad: (1, 0) },
            );
            let y = crate::autograd::relu(g, y);
            sum_all(g, y)
        });
    }

    #[test]
    fn group_norm_gradcheck() {
        check_scalar_fn(&[&[2, 4, 3, 3], &[4], &[4]], |g, ids| {
            let y = group_norm(g, ids[0], ids[1], ids[2], 2, 1e-5);
            sum_all(g, y)
        });
    }

    #[test]
    fn group_norm_zero_input_is_finite() {
        let mut g = Graph::new();
        let x = g.leaf(ArrayD::zeros(IxDyn(&[1, 4, 2, 2])));
        let gamma = g.leaf(ArrayD::zeros(IxDyn(&[4])));
        let beta = g.leaf(ArrayD::zeros(IxDyn(&[4])));
        let y = group_norm(&mut g, x, gamma, beta, 2, 1e-5);
        assert!(g.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn upsample_gradcheck() {
        check_scalar_fn(&[&[1, 2, 3, 3]], |g, ids| {
            let y = bilinear_up2x(g, ids[0]);
            sum_all(g, y)
        });
        check_scalar_fn(&[&[1, 2, 2, 2]], |g, ids| {
            let y = nearest_up2x(g, ids[0]);
            sum_all(g, y)
        });
    }

    #[test]
    fn max_pool_gradcheck() {
        check_scalar_fn(&[&[1, 2, 4, 4]], |g, ids| {
            let y = max_pool2x2(g, ids[0]);
            sum_all(g, y)
        });
    }

    #[test]
    fn roi_align_single_cell() {
        // box covering exactly feature cell (0,0) at stride 4, S=1, 1 sample
        let mut g = Graph::new();
        let feat = g.leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let b = BoxF::new(0.0, 0.0, 4.0, 4.0);
        let y = roi_align(&mut g, feat, &[b], 0.25, 1, 1);
        assert!((g.value(y)[[0, 0, 0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn roi_align_bin_centers_match_hand_bilinear() {
        // 2x2 map {1,2,3,4}, box over all, S=2, one sample per bin: bin centers
        // coincide with pixel centers, so output equals the input values.
        let mut g = Graph::new();
        let feat = g.leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let b = BoxF::new(0.0, 0.0, 8.0, 8.0);
        let y = roi_align(&mut g, feat, &[b], 0.25, 2, 1);
        let v = g.value(y);
        assert!((v[[0, 0, 0, 0]] - 1.0).abs() < 1e-12);
        assert!((v[[0, 0, 0, 1]] - 2.0).abs() < 1e-12);
        assert!((v[[0, 0, 1, 0]] - 3.0).abs() < 1e-12);
        assert!((v[[0, 0, 1, 1]] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn roi_align_constant_map_constant_output() {
        let mut g = Graph::new();
        let feat = g.leaf(ArrayD::from_elem(IxDyn(&[3, 8, 8]), 2.5));
        let b = BoxF::new(3.0, 5.0, 21.0, 17.0);
        let y = roi_align(&mut g, feat, &[b], 0.5, 7, 2);
        assert!(g.value(y).iter().all(|v| (v - 2.5).abs() < 1e-9));
    }

    #[test]
    fn roi_align_zero_area_box_zero_features() {
        let mut g = Graph::new();
        let feat = g.leaf(ArrayD::from_elem(IxDyn(&[1, 4, 4]), 1.0));
        let b = BoxF::new(2.0, 2.0, 2.0, 5.0);
        let y = roi_align(&mut g, feat, &[b], 1.0, 3, 2);
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn roi_align_gradcheck() {
        let boxes = vec![BoxF::new(1.0, 1.0, 6.0, 5.0), BoxF::new(0.0, 2.0, 7.5, 7.5)];
        check_scalar_fn(&[&[2, 8, 8]], move |g, ids| {
            let y = roi_align(g, ids[0], &boxes, 1.0, 3, 2);
            sum_all(g, y)
        });
    }
}
