//! 2-D convolution (optionally grouped/depth-wise) and zero padding.
//!
//! Ungrouped convolutions go through an im2col buffer and GEMM; grouped ones
//! (the depth-wise spatial filter) use direct loops that vectorize over the
//! output width. The im2col buffer is rebuilt in backward rather than kept
//! alive on the tape.

use rayon::prelude::*;

use super::autograd::make_result;
use super::ops::{batched_gemm, Layout};
use super::{Element, Result, Tensor, TensorError};

#[derive(Clone, Copy)]
struct ConvGeo {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    c_per_group: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl<T: Element> Tensor<T> {
    /// Cross-correlation of `self [B, Cin, H, W]` with `kernel
    /// [Cout, Cin/groups, kh, kw]`; `groups == Cin` gives a depth-wise
    /// convolution with channel multiplier `Cout / Cin`.
    pub fn conv2d(
        &self,
        kernel: &Tensor<T>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Tensor<T>> {
        self.conv2d_bias(kernel, None, stride, padding, groups)
    }

    /// conv2d with the bias fused into the output accumulation.
    pub(crate) fn conv2d_bias(
        &self,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Tensor<T>> {
        let geo = self.conv_geometry(kernel, stride, padding, groups)?;
        if let Some(b) = bias {
            if b.shape() != [geo.c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![geo.c_out],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let out_shape = vec![geo.batch, geo.c_out, geo.ho, geo.wo];
        let mut out = vec![T::zero(); geo.batch * geo.c_out * geo.ho * geo.wo];
        {
            let (x_ref, k_ref) = (self.data(), kernel.data());
            let x: &[T] = &x_ref;
            let k: &[T] = &k_ref;
            let bias_data = bias.map(|b| b.to_vec());
            let run = |bi: usize, out_b: &mut [T]| {
                if geo.groups == 1 {
                    conv_forward_gemm(&geo, x, k, bias_data.as_deref(), bi, out_b);
                } else {
                    conv_forward_direct(&geo, x, k, bias_data.as_deref(), bi, out_b);
                }
            };
            let plane = geo.c_out * geo.ho * geo.wo;
            if geo.batch > 1 {
                out.par_chunks_mut(plane)
                    .enumerate()
                    .for_each(|(bi, ob)| run(bi, ob));
            } else {
                run(0, &mut out);
            }
        }
        let mut inputs = vec![self.clone(), kernel.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        let has_bias = bias.is_some();
        make_result("conv2d", out_shape, out, inputs, move |ctx| {
            let x_t = &ctx.inputs[0];
            let k_t = &ctx.inputs[1];
            let g = ctx.grad_output;
            let dx = x_t.tracked().then(|| {
                let k = k_t.data();
                conv_backward_input(&geo, &k, g)
            });
            let dk = k_t.tracked().then(|| {
                let x = x_t.data();
                conv_backward_kernel(&geo, &x, g)
            });
            let mut grads = vec![dx, dk];
            if has_bias {
                let db = ctx.inputs[2]
                    .tracked()
                    .then(|| conv_backward_bias(&geo, g));
                grads.push(db);
            }
            grads
        })
    }

    fn conv_geometry(
        &self,
        kernel: &Tensor<T>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<ConvGeo> {
        let arg = |msg: String| TensorError::InvalidArgument { op: "conv2d", msg };
        let xs = self.shape();
        let ks = kernel.shape();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        let (batch, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, c_per_group, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if groups == 0 || c_in % groups != 0 {
            return Err(arg(format!("groups ({groups}) must divide input channels ({c_in})")));
        }
        if c_out % groups != 0 {
            return Err(arg(format!("groups ({groups}) must divide output channels ({c_out})")));
        }
        if c_per_group != c_in / groups {
            return Err(arg(format!(
                "kernel expects {c_per_group} channels per group, input provides {}",
                c_in / groups
            )));
        }
        let (sh, sw) = stride;
        if sh == 0 || sw == 0 {
            return Err(arg("stride must be positive".into()));
        }
        let (ph, pw) = padding;
        if kh > h + 2 * ph || kw > w + 2 * pw {
            return Err(arg(format!(
                "kernel ({kh}x{kw}) larger than padded input ({}x{})",
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        Ok(ConvGeo {
            batch,
            c_in,
            h,
            w,
            c_out,
            c_per_group,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            groups,
            ho: (h + 2 * ph - kh) / sh + 1,
            wo: (w + 2 * pw - kw) / sw + 1,
        })
    }

    /// Inserts `before`/`after` zeros along `axis`.
    pub fn pad_zero(&self, axis: usize, before: usize, after: usize) -> Result<Tensor<T>> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "pad_zero",
                axis,
                rank,
            });
        }
        let (outer, extent, inner) = super::ops::axis_split(self.shape(), axis);
        let new_extent = extent + before + after;
        let mut out = vec![T::zero(); outer * new_extent * inner];
        {
            let xd = self.data();
            for o in 0..outer {
                let dst = (o * new_extent + before) * inner;
                let src = o * extent * inner;
                out[dst..dst + extent * inner].copy_from_slice(&xd[src..src + extent * inner]);
            }
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = new_extent;
        make_result(
            "pad_zero",
            out_shape,
            out,
            vec![self.clone()],
            move |ctx| {
                let mut dx = vec![T::zero(); outer * extent * inner];
                for o in 0..outer {
                    let src = (o * new_extent + before) * inner;
                    let dst = o * extent * inner;
                    dx[dst..dst + extent * inner]
                        .copy_from_slice(&ctx.grad_output[src..src + extent * inner]);
                }
                vec![Some(dx)]
            },
        )
    }
}

/// Patch-major im2col (ungrouped): row per output position, `Cin*kh*kw` wide.
fn im2col<T: Element>(geo: &ConvGeo, x_b: &[T], col: &mut [T]) {
    debug_assert_eq!(geo.groups, 1);
    let k_row = geo.c_in * geo.kh * geo.kw;
    debug_assert_eq!(col.len(), geo.ho * geo.wo * k_row);
    for oh in 0..geo.ho {
        for ow in 0..geo.wo {
            let patch = &mut col[(oh * geo.wo + ow) * k_row..(oh * geo.wo + ow + 1) * k_row];
            let mut idx = 0usize;
            for c in 0..geo.c_in {
                for ki in 0..geo.kh {
                    let ih = (oh * geo.sh + ki) as isize - geo.ph as isize;
                    if ih < 0 || ih >= geo.h as isize {
                        for p in patch[idx..idx + geo.kw].iter_mut() {
                            *p = T::zero();
                        }
                        idx += geo.kw;
                        continue;
                    }
                    let row = &x_b[(c * geo.h + ih as usize) * geo.w..(c * geo.h + ih as usize + 1) * geo.w];
                    for kj in 0..geo.kw {
                        let iw = (ow * geo.sw + kj) as isize - geo.pw as isize;
                        patch[idx] = if iw < 0 || iw >= geo.w as isize {
                            T::zero()
                        } else {
                            row[iw as usize]
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

fn conv_forward_gemm<T: Element>(
    geo: &ConvGeo,
    x: &[T],
    k: &[T],
    bias: Option<&[T]>,
    bi: usize,
    out_b: &mut [T],
) {
    let k_row = geo.c_in * geo.kh * geo.kw;
    let p = geo.ho * geo.wo;
    let mut col = vec![T::zero(); p * k_row];
    let x_b = &x[bi * geo.c_in * geo.h * geo.w..(bi + 1) * geo.c_in * geo.h * geo.w];
    im2col(geo, x_b, &mut col);
    let beta = match bias {
        Some(b) => {
            for (oc, row) in out_b.chunks_mut(p).enumerate() {
                for v in row.iter_mut() {
                    *v = b[oc];
                }
            }
            T::one()
        }
        None => T::zero(),
    };
    // out[Cout, P] = K[Cout, k_row] * col^T
    batched_gemm(
        k,
        Layout::normal(geo.c_out, k_row),
        &col,
        Layout::transposed(k_row, p),
        out_b,
        1,
        geo.c_out,
        k_row,
        p,
        beta,
    );
}

fn conv_forward_direct<T: Element>(
    geo: &ConvGeo,
    x: &[T],
    k: &[T],
    bias: Option<&[T]>,
    bi: usize,
    out_b: &mut [T],
) {
    let oc_per_group = geo.c_out / geo.groups;
    let x_b = &x[bi * geo.c_in * geo.h * geo.w..];
    for oc in 0..geo.c_out {
        let group = oc / oc_per_group;
        let out_c = &mut out_b[oc * geo.ho * geo.wo..(oc + 1) * geo.ho * geo.wo];
        let init = bias.map_or(T::zero(), |b| b[oc]);
        for v in out_c.iter_mut() {
            *v = init;
        }
        for ci in 0..geo.c_per_group {
            let ic = group * geo.c_per_group + ci;
            let x_c = &x_b[ic * geo.h * geo.w..(ic + 1) * geo.h * geo.w];
            for ki in 0..geo.kh {
                for kj in 0..geo.kw {
                    let kv = k[((oc * geo.c_per_group + ci) * geo.kh + ki) * geo.kw + kj];
                    if kv == T::zero() {
                        continue;
                    }
                    accumulate_tap(geo, x_c, kv, ki, kj, out_c);
                }
            }
        }
    }
}

/// out[oh, ow] += kv * x[oh*sh+ki-ph, ow*sw+kj-pw] over the valid range.
fn accumulate_tap<T: Element>(
    geo: &ConvGeo,
    x_c: &[T],
    kv: T,
    ki: usize,
    kj: usize,
    out_c: &mut [T],
) {
    let (ow_lo, ow_hi) = valid_range(geo.wo, geo.sw, geo.pw, kj, geo.w);
    for oh in 0..geo.ho {
        let ih = (oh * geo.sh + ki) as isize - geo.ph as isize;
        if ih < 0 || ih >= geo.h as isize {
            continue;
        }
        let x_row = &x_c[ih as usize * geo.w..(ih as usize + 1) * geo.w];
        let out_row = &mut out_c[oh * geo.wo..(oh + 1) * geo.wo];
        if geo.sw == 1 {
            let off = kj as isize - geo.pw as isize;
            for ow in ow_lo..ow_hi {
                out_row[ow] += kv * x_row[(ow as isize + off) as usize];
            }
        } else {
            for ow in ow_lo..ow_hi {
                let iw = (ow * geo.sw + kj) as isize - geo.pw as isize;
                out_row[ow] += kv * x_row[iw as usize];
            }
        }
    }
}

/// Output columns whose sampled input column is in-bounds.
fn valid_range(wo: usize, sw: usize, pw: usize, kj: usize, w: usize) -> (usize, usize) {
    let mut lo = 0usize;
    while lo < wo && (lo * sw + kj) as isize - (pw as isize) < 0 {
        lo += 1;
    }
    let mut hi = wo;
    while hi > lo && ((hi - 1) * sw + kj) as isize - (pw as isize) >= w as isize {
        hi -= 1;
    }
    (lo, hi)
}

fn conv_backward_bias<T: Element>(geo: &ConvGeo, g: &[T]) -> Vec<T> {
    let p = geo.ho * geo.wo;
    let plane = geo.c_out * p;
    let mut db = vec![T::zero(); geo.c_out];
    db.par_iter_mut().enumerate().for_each(|(oc, slot)| {
        let mut acc = 0.0f64;
        for bi in 0..geo.batch {
            let row = &g[bi * plane + oc * p..bi * plane + (oc + 1) * p];
            acc += row.iter().map(|&v| v.to_f64()).sum::<f64>();
        }
        *slot = T::from_f64(acc);
    });
    db
}

fn conv_backward_kernel<T: Element>(geo: &ConvGeo, x: &[T], g: &[T]) -> Vec<T> {
    let p = geo.ho * geo.wo;
    let k_len = geo.c_out * geo.c_per_group * geo.kh * geo.kw;
    if geo.groups == 1 {
        let k_row = geo.c_in * geo.kh * geo.kw;
        // per-batch partials combined in batch order
        let partials: Vec<Vec<T>> = (0..geo.batch)
            .into_par_iter()
            .map(|bi| {
                let mut col = vec![T::zero(); p * k_row];
                im2col(geo, &x[bi * geo.c_in * geo.h * geo.w..(bi + 1) * geo.c_in * geo.h * geo.w], &mut col);
                let g_b = &g[bi * geo.c_out * p..(bi + 1) * geo.c_out * p];
                let mut dk = vec![T::zero(); k_len];
                batched_gemm(
                    g_b,
                    Layout::normal(geo.c_out, p),
                    &col,
                    Layout::normal(p, k_row),
                    &mut dk,
                    1,
                    geo.c_out,
                    p,
                    k_row,
                    T::zero(),
                );
                dk
            })
            .collect();
        let mut dk = vec![T::zero(); k_len];
        for part in partials {
            for (d, v) in dk.iter_mut().zip(part) {
                *d += v;
            }
        }
        return dk;
    }
    let oc_per_group = geo.c_out / geo.groups;
    let taps = geo.c_per_group * geo.kh * geo.kw;
    let mut dk = vec![T::zero(); k_len];
    dk.par_chunks_mut(taps).enumerate().for_each(|(oc, dk_oc)| {
        let group = oc / oc_per_group;
        for ci in 0..geo.c_per_group {
            let ic = group * geo.c_per_group + ci;
            for ki in 0..geo.kh {
                for kj in 0..geo.kw {
                    let (ow_lo, ow_hi) = valid_range(geo.wo, geo.sw, geo.pw, kj, geo.w);
                    let mut acc = 0.0f64;
                    for bi in 0..geo.batch {
                        let x_c = &x[(bi * geo.c_in + ic) * geo.h * geo.w..];
                        let g_c = &g[(bi * geo.c_out + oc) * p..];
                        for oh in 0..geo.ho {
                            let ih = (oh * geo.sh + ki) as isize - geo.ph as isize;
                            if ih < 0 || ih >= geo.h as isize {
                                continue;
                            }
                            let x_row = &x_c[ih as usize * geo.w..(ih as usize + 1) * geo.w];
                            let g_row = &g_c[oh * geo.wo..(oh + 1) * geo.wo];
                            let mut s = 0.0f64;
                            if geo.sw == 1 {
                                let off = kj as isize - geo.pw as isize;
                                for ow in ow_lo..ow_hi {
                                    s += (x_row[(ow as isize + off) as usize] * g_row[ow]).to_f64();
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = (ow * geo.sw + kj) as isize - geo.pw as isize;
                                    s += (x_row[iw as usize] * g_row[ow]).to_f64();
                                }
                            }
                            acc += s;
                        }
                    }
                    dk_oc[(ci * geo.kh + ki) * geo.kw + kj] = T::from_f64(acc);
                }
            }
        }
    });
    dk
}

fn conv_backward_input<T: Element>(geo: &ConvGeo, k: &[T], g: &[T]) -> Vec<T> {
    let p = geo.ho * geo.wo;
    let in_plane = geo.c_in * geo.h * geo.w;
    let mut dx = vec![T::zero(); geo.batch * in_plane];
    let run = |bi: usize, dx_b: &mut [T]| {
        let g_b = &g[bi * geo.c_out * p..(bi + 1) * geo.c_out * p];
        if geo.groups == 1 {
            let k_row = geo.c_in * geo.kh * geo.kw;
            // dcol[P, k_row] = G_b^T * K
            let mut dcol = vec![T::zero(); p * k_row];
            batched_gemm(
                g_b,
                Layout::normal(geo.c_out, p).swap(),
                k,
                Layout::normal(geo.c_out, k_row),
                &mut dcol,
                1,
                p,
                geo.c_out,
                k_row,
                T::zero(),
            );
            col2im(geo, &dcol, dx_b);
        } else {
            let oc_per_group = geo.c_out / geo.groups;
            for oc in 0..geo.c_out {
                let group = oc / oc_per_group;
                let g_c = &g_b[oc * p..(oc + 1) * p];
                for ci in 0..geo.c_per_group {
                    let ic = group * geo.c_per_group + ci;
                    let dx_c = &mut dx_b[ic * geo.h * geo.w..(ic + 1) * geo.h * geo.w];
                    for ki in 0..geo.kh {
                        for kj in 0..geo.kw {
                            let kv = k[((oc * geo.c_per_group + ci) * geo.kh + ki) * geo.kw + kj];
                            if kv == T::zero() {
                                continue;
                            }
                            scatter_tap(geo, g_c, kv, ki, kj, dx_c);
                        }
                    }
                }
            }
        }
    };
    if geo.batch > 1 {
        dx.par_chunks_mut(in_plane)
            .enumerate()
            .for_each(|(bi, dxb)| run(bi, dxb));
    } else {
        run(0, &mut dx);
    }
    dx
}

/// dx[ih, iw] += kv * g[oh, ow] for every output position sampling (ih, iw).
fn scatter_tap<T: Element>(geo: &ConvGeo, g_c: &[T], kv: T, ki: usize, kj: usize, dx_c: &mut [T]) {
    let (ow_lo, ow_hi) = valid_range(geo.wo, geo.sw, geo.pw, kj, geo.w);
    for oh in 0..geo.ho {
        let ih = (oh * geo.sh + ki) as isize - geo.ph as isize;
        if ih < 0 || ih >= geo.h as isize {
            continue;
        }
        let g_row = &g_c[oh * geo.wo..(oh + 1) * geo.wo];
        let dx_row = &mut dx_c[ih as usize * geo.w..(ih as usize + 1) * geo.w];
        if geo.sw == 1 {
            let off = kj as isize - geo.pw as isize;
            for ow in ow_lo..ow_hi {
                dx_row[(ow as isize + off) as usize] += kv * g_row[ow];
            }
        } else {
            for ow in ow_lo..ow_hi {
                let iw = (ow * geo.sw + kj) as isize - geo.pw as isize;
                dx_row[iw as usize] += kv * g_row[ow];
            }
        }
    }
}

fn col2im<T: Element>(geo: &ConvGeo, col: &[T], dx_b: &mut [T]) {
    let k_row = geo.c_in * geo.kh * geo.kw;
    for oh in 0..geo.ho {
        for ow in 0..geo.wo {
            let patch = &col[(oh * geo.wo + ow) * k_row..(oh * geo.wo + ow + 1) * k_row];
            let mut idx = 0usize;
            for c in 0..geo.c_in {
                for ki in 0..geo.kh {
                    let ih = (oh * geo.sh + ki) as isize - geo.ph as isize;
                    if ih < 0 || ih >= geo.h as isize {
                        idx += geo.kw;
                        continue;
                    }
                    let row = &mut dx_b[(c * geo.h + ih as usize) * geo.w..(c * geo.h + ih as usize + 1) * geo.w];
                    for kj in 0..geo.kw {
                        let iw = (ow * geo.sw + kj) as isize - geo.pw as isize;
                        if iw >= 0 && iw < geo.w as isize {
                            row[iw as usize] += patch[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{RngStream, Tensor, TensorError};

    /// Reference convolution: plain nested loops, no blocking or GEMM.
    fn conv_naive(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Tensor<f64> {
        let (b, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (c_out, cpg, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        let (sh, sw) = stride;
        let (ph, pw) = padding;
        let ho = (h + 2 * ph - kh) / sh + 1;
        let wo = (w + 2 * pw - kw) / sw + 1;
        let xd = x.data();
        let kd = k.data();
        let mut out = vec![0.0f64; b * c_out * ho * wo];
        let ocpg = c_out / groups;
        for bi in 0..b {
            for oc in 0..c_out {
                let g = oc / ocpg;
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cpg {
                            let ic = g * cpg + ci;
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ih = (oh * sh + ki) as isize - ph as isize;
                                    let iw = (ow * sw + kj) as isize - pw as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                        continue;
                                    }
                                    acc += xd[((bi * c_in + ic) * h + ih as usize) * w + iw as usize]
                                        * kd[((oc * cpg + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        out[((bi * c_out + oc) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(vec![b, c_out, ho, wo], out).unwrap()
    }

    #[test]
    fn conv_paper_shape() {
        // Temporal front end: 256 filters of 1x16 at stride 16 over the
        // zero-padded 129x512 window -> 129x32 maps.
        let x = Tensor::<f32>::zeros(vec![1, 1, 129, 512]);
        let k = Tensor::<f32>::zeros(vec![256, 1, 1, 16]);
        let y = x.conv2d(&k, (1, 16), (0, 0), 1).unwrap();
        assert_eq!(y.shape(), &[1, 256, 129, 32]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = RngStream::new(2);
        let x = rng.uniform_tensor::<f64>(vec![2, 3, 4, 5], -1.0, 1.0);
        // 1x1 depth-wise kernel of weight 1 reproduces the input
        let k = Tensor::<f64>::ones(vec![3, 1, 1, 1]);
        let y = x.conv2d(&k, (1, 1), (0, 0), 3).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv_row_hand_example() {
        let x = Tensor::from_vec(vec![1, 1, 1, 4], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::from_vec(vec![1, 1, 1, 2], vec![1.0, 1.0]).unwrap();
        let y = x.conv2d(&k, (1, 2), (0, 0), 1).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn conv_validation_errors() {
        let x = Tensor::<f32>::zeros(vec![1, 3, 4, 4]);
        let k = Tensor::<f32>::zeros(vec![4, 1, 2, 2]);
        // 2 does not divide 3 input channels
        assert!(matches!(
            x.conv2d(&k, (1, 1), (0, 0), 2),
            Err(TensorError::InvalidArgument { .. })
        ));
        let huge = Tensor::<f32>::zeros(vec![2, 3, 9, 2]);
        assert!(matches!(
            x.conv2d(&huge, (1, 1), (2, 0), 1),
            Err(TensorError::InvalidArgument { .. })
        ));
    }

    #[test]
    fn depthwise_equals_independent_convs() {
        let mut rng = RngStream::new(7);
        let x = rng.uniform_tensor::<f64>(vec![2, 4, 8, 8], -1.0, 1.0);
        let k = rng.uniform_tensor::<f64>(vec![8, 1, 3, 3], -1.0, 1.0);
        let fast = x.conv2d(&k, (1, 1), (1, 1), 4).unwrap();
        // brute force: each input channel convolved with its own 2 filters
        let naive = conv_naive(&x, &k, (1, 1), (1, 1), 4);
        let (f, n) = (fast.to_vec(), naive.to_vec());
        for (a, b) in f.iter().zip(&n) {
            assert!((a - b).abs() < 1e-12);
        }
        // and per-channel single convolutions concatenated give the same maps
        for c in 0..4 {
            let xc = x.narrow(1, c, 1).unwrap();
            let kc = k.narrow(0, 2 * c, 2).unwrap();
            let yc = xc.conv2d(&kc, (1, 1), (1, 1), 1).unwrap();
            let expect = fast.narrow(1, 2 * c, 2).unwrap();
            for (a, b) in yc.to_vec().iter().zip(expect.to_vec()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grouped_matches_naive_with_stride_and_padding() {
        let mut rng = RngStream::new(9);
        let x = rng.uniform_tensor::<f64>(vec![2, 6, 7, 9], -1.0, 1.0);
        let k = rng.uniform_tensor::<f64>(vec![4, 3, 3, 2], -1.0, 1.0);
        let fast = x.conv2d(&k, (2, 3), (1, 2), 2).unwrap();
        let naive = conv_naive(&x, &k, (2, 3), (1, 2), 2);
        assert_eq!(fast.shape(), naive.shape());
        for (a, b) in fast.to_vec().iter().zip(naive.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ungrouped_matches_naive() {
        let mut rng = RngStream::new(10);
        let x = rng.uniform_tensor::<f64>(vec![2, 3, 6, 5], -1.0, 1.0);
        let k = rng.uniform_tensor::<f64>(vec![4, 3, 2, 3], -1.0, 1.0);
        let fast = x.conv2d(&k, (2, 1), (1, 1), 1).unwrap();
        let naive = conv_naive(&x, &k, (2, 1), (1, 1), 1);
        assert_eq!(fast.shape(), naive.shape());
        for (a, b) in fast.to_vec().iter().zip(naive.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_is_linear_in_input() {
        let mut rng = RngStream::new(21);
        let a = rng.uniform_tensor::<f32>(vec![2, 2, 6, 6], -1.0, 1.0);
        let b = rng.uniform_tensor::<f32>(vec![2, 2, 6, 6], -1.0, 1.0);
        let k = rng.uniform_tensor::<f32>(vec![4, 2, 3, 3], -1.0, 1.0);
        let lhs = a.add(&b).unwrap().conv2d(&k, (1, 1), (1, 1), 1).unwrap();
        let rhs = a
            .conv2d(&k, (1, 1), (1, 1), 1)
            .unwrap()
            .add(&b.conv2d(&k, (1, 1), (1, 1), 1).unwrap())
            .unwrap();
        for (x, y) in lhs.to_vec().iter().zip(rhs.to_vec()) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1.0);
            assert!(rel < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn pad_zero_examples() {
        let x = Tensor::<f32>::ones(vec![1, 1, 129, 500]);
        let y = x.pad_zero(3, 6, 6).unwrap();
        assert_eq!(y.shape(), &[1, 1, 129, 512]);

        let same = x.pad_zero(3, 0, 0).unwrap();
        assert_eq!(same.shape(), x.shape());
        assert_eq!(same.to_vec(), x.to_vec());

        let v = Tensor::from_vec(vec![2], vec![1.0f64, 2.0]).unwrap();
        assert_eq!(
            v.pad_zero(0, 1, 1).unwrap().to_vec(),
            vec![0.0, 1.0, 2.0, 0.0]
        );
        assert!(matches!(
            v.pad_zero(1, 1, 1),
            Err(TensorError::InvalidAxis { .. })
        ));
    }

    #[test]
    fn pad_zero_inserts_exact_zeros() {
        let mut rng = RngStream::new(4);
        let x = rng.uniform_tensor::<f64>(vec![2, 3], 0.5, 1.5);
        let y = x.pad_zero(1, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 6]);
        let yd = y.to_vec();
        for r in 0..2 {
            assert_eq!(yd[r * 6], 0.0);
            assert_eq!(yd[r * 6 + 1], 0.0);
            assert_eq!(yd[r * 6 + 5], 0.0);
        }
    }
}
