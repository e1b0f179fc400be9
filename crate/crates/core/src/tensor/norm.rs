//! Fused batch/layer normalization kernels with hand-derived backward rules.
//!
//! Statistics accumulate in f64 regardless of the element type so channel
//! sums stay stable and summation order stays fixed.

use rayon::prelude::*;

use super::autograd::make_result;
use super::{Element, Result, Tensor, TensorError};

/// Per-channel statistics of one training-mode batch-norm pass, returned so
/// the layer can update its running estimates.
pub(crate) struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (1/N) variance used for normalization.
    pub var: Vec<T>,
}

/// Training-mode batch norm over `[B, C, H, W]`: per-channel statistics over
/// (B, H, W), then `gamma * x_hat + beta`.
pub(crate) fn batchnorm2d_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(TensorError::InvalidArgument {
            op: "batchnorm2d",
            msg: format!("expected rank-4 input, got {xs:?}"),
        });
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm2d",
            lhs: vec![c],
            rhs: gamma.shape().to_vec(),
        });
    }
    let n_norm = b * h * w;
    if n_norm < 2 {
        return Err(TensorError::InvalidArgument {
            op: "batchnorm2d",
            msg: format!("training mode needs at least 2 values per channel, got {n_norm}"),
        });
    }
    let plane = h * w;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    {
        let x_ref = x.data();
        let xd: &[T] = &x_ref;
        mean.par_iter_mut()
            .zip(var.par_iter_mut())
            .zip(inv_std.par_iter_mut())
            .enumerate()
            .for_each(|(ci, ((m, v), is))| {
                let mut sum = 0.0f64;
                let mut sumsq = 0.0f64;
                for bi in 0..b {
                    let row = &xd[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                    for &val in row {
                        let f = val.to_f64();
                        sum += f;
                        sumsq += f * f;
                    }
                }
                let mu = sum / n_norm as f64;
                let va = (sumsq / n_norm as f64 - mu * mu).max(0.0);
                *m = T::from_f64(mu);
                *v = T::from_f64(va);
                *is = T::from_f64(1.0 / (va + eps).sqrt());
            });
    }
    let y = bn_affine(x, gamma, beta, &mean, &inv_std, b, c, plane, true)?;
    Ok((
        y,
        BatchStats {
            mean,
            var,
        },
    ))
}

/// Eval-mode batch norm: normalizes with the provided running statistics.
pub(crate) fn batchnorm2d_eval<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(TensorError::InvalidArgument {
            op: "batchnorm2d",
            msg: format!("expected rank-4 input, got {xs:?}"),
        });
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let inv_std: Vec<T> = running_var
        .iter()
        .map(|&v| T::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
        .collect();
    bn_affine(x, gamma, beta, running_mean, &inv_std, b, c, h * w, false)
}

/// y = gamma * (x - mean) * inv_std + beta with the batch-norm backward rule.
/// `train_stats` marks whether mean/inv_std depend on x (training mode).
#[allow(clippy::too_many_arguments)]
fn bn_affine<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    b: usize,
    c: usize,
    plane: usize,
    train_stats: bool,
) -> Result<Tensor<T>> {
    let n_norm = b * plane;
    let mut out = vec![T::zero(); b * c * plane];
    {
        let (x_ref, g_ref, b_ref) = (x.data(), gamma.data(), beta.data());
        let xd: &[T] = &x_ref;
        let gd: &[T] = &g_ref;
        let bd: &[T] = &b_ref;
        let scale: Vec<T> = (0..c).map(|ci| gd[ci] * inv_std[ci]).collect();
        let shift: Vec<T> = (0..c).map(|ci| bd[ci] - mean[ci] * scale[ci]).collect();
        out.par_chunks_mut(plane).enumerate().for_each(|(chunk, o)| {
            let ci = chunk % c;
            let (a, d) = (scale[ci], shift[ci]);
            let row = &xd[chunk * plane..(chunk + 1) * plane];
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = a * xi + d;
            }
        });
    }
    let mean_b = mean.to_vec();
    let inv_b = inv_std.to_vec();
    make_result(
        "batchnorm2d",
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |ctx| {
            let x_t = &ctx.inputs[0];
            let gamma_t = &ctx.inputs[1];
            let g = ctx.grad_output;
            let (x_ref, g_ref) = (x_t.data(), gamma_t.data());
            let xd: &[T] = &x_ref;
            let gd: &[T] = &g_ref;
            // per-channel sums of g and g * x_hat
            let mut s1 = vec![0.0f64; c];
            let mut s2 = vec![0.0f64; c];
            s1.par_iter_mut()
                .zip(s2.par_iter_mut())
                .enumerate()
                .for_each(|(ci, (a1, a2))| {
                    let mu = mean_b[ci].to_f64();
                    let is = inv_b[ci].to_f64();
                    for bi in 0..b {
                        let base = (bi * c + ci) * plane;
                        let gr = &g[base..base + plane];
                        let xr = &xd[base..base + plane];
                        for (gi, xi) in gr.iter().zip(xr) {
                            let xh = (xi.to_f64() - mu) * is;
                            *a1 += gi.to_f64();
                            *a2 += gi.to_f64() * xh;
                        }
                    }
                });
            let dgamma: Vec<T> = s2.iter().map(|&v| T::from_f64(v)).collect();
            let dbeta: Vec<T> = s1.iter().map(|&v| T::from_f64(v)).collect();
            let dx = x_t.tracked().then(|| {
                let mut dx = vec![T::zero(); g.len()];
                dx.par_chunks_mut(plane).enumerate().for_each(|(chunk, d)| {
                    let ci = chunk % c;
                    let mu = mean_b[ci];
                    let is = inv_b[ci];
                    let ga = gd[ci];
                    let gr = &g[chunk * plane..(chunk + 1) * plane];
                    let xr = &xd[chunk * plane..(chunk + 1) * plane];
                    if train_stats {
                        let m1 = T::from_f64(s1[ci] / n_norm as f64);
                        let m2 = T::from_f64(s2[ci] / n_norm as f64);
                        for i in 0..plane {
                            let xh = (xr[i] - mu) * is;
                            d[i] = ga * is * (gr[i] - m1 - xh * m2);
                        }
                    } else {
                        for i in 0..plane {
                            d[i] = ga * is * gr[i];
                        }
                    }
                });
                dx
            });
            vec![dx, Some(dgamma), Some(dbeta)]
        },
    )
}

/// Layer norm over the last axis with learned affine.
pub(crate) fn layernorm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let d = *xs.last().ok_or(TensorError::InvalidArgument {
        op: "layernorm",
        msg: "scalar input".into(),
    })?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(TensorError::ShapeMismatch {
            op: "layernorm",
            lhs: vec![d],
            rhs: gamma.shape().to_vec(),
        });
    }
    let rows = x.numel() / d;
    let mut out = vec![T::zero(); x.numel()];
    let mut inv_std = vec![T::zero(); rows];
    let mut means = vec![T::zero(); rows];
    {
        let (x_ref, g_ref, b_ref) = (x.data(), gamma.data(), beta.data());
        let xd: &[T] = &x_ref;
        let gd: &[T] = &g_ref;
        let bd: &[T] = &b_ref;
        out.par_chunks_mut(d)
            .zip(inv_std.par_iter_mut())
            .zip(means.par_iter_mut())
            .enumerate()
            .for_each(|(r, ((o, is), m))| {
                let row = &xd[r * d..(r + 1) * d];
                let mut sum = 0.0f64;
                let mut sumsq = 0.0f64;
                for &v in row {
                    let f = v.to_f64();
                    sum += f;
                    sumsq += f * f;
                }
                let mu = sum / d as f64;
                let va = (sumsq / d as f64 - mu * mu).max(0.0);
                let s = 1.0 / (va + eps).sqrt();
                *is = T::from_f64(s);
                *m = T::from_f64(mu);
                let (mu_t, s_t) = (T::from_f64(mu), T::from_f64(s));
                for i in 0..d {
                    o[i] = (row[i] - mu_t) * s_t * gd[i] + bd[i];
                }
            });
    }
    make_result(
        "layernorm",
        xs.to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |ctx| {
            let x_t = &ctx.inputs[0];
            let gamma_t = &ctx.inputs[1];
            let g = ctx.grad_output;
            let (x_ref, g_ref) = (x_t.data(), gamma_t.data());
            let xd: &[T] = &x_ref;
            let gd: &[T] = &g_ref;
            let dx_needed = x_t.tracked();
            let mut dx = vec![T::zero(); g.len()];
            // chunked row-parallel pass; per-chunk affine partials merged in order
            const ROWS_PER_CHUNK: usize = 64;
            let chunk_elems = ROWS_PER_CHUNK * d;
            let partials: Vec<(Vec<f64>, Vec<f64>)> = dx
                .par_chunks_mut(chunk_elems)
                .enumerate()
                .map(|(ci, dchunk)| {
                    let mut dg = vec![0.0f64; d];
                    let mut db = vec![0.0f64; d];
                    let row0 = ci * ROWS_PER_CHUNK;
                    for (rl, drow) in dchunk.chunks_mut(d).enumerate() {
                        let r = row0 + rl;
                        let xrow = &xd[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let mu = means[r];
                        let is = inv_std[r];
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for i in 0..d {
                            let xh = ((xrow[i] - mu) * is).to_f64();
                            let gi = grow[i].to_f64();
                            dg[i] += gi * xh;
                            db[i] += gi;
                            let gg = gi * gd[i].to_f64();
                            m1 += gg;
                            m2 += gg * xh;
                        }
                        if dx_needed {
                            m1 /= d as f64;
                            m2 /= d as f64;
                            for i in 0..d {
                                let xh = ((xrow[i] - mu) * is).to_f64();
                                let gg = grow[i].to_f64() * gd[i].to_f64();
                                drow[i] = T::from_f64(is.to_f64() * (gg - m1 - xh * m2));
                            }
                        }
                    }
                    (dg, db)
                })
                .collect();
            let mut dgamma = vec![0.0f64; d];
            let mut dbeta = vec![0.0f64; d];
            for (dg, db) in partials {
                for i in 0..d {
                    dgamma[i] += dg[i];
                    dbeta[i] += db[i];
                }
            }
            vec![
                dx_needed.then_some(dx),
                Some(dgamma.into_iter().map(T::from_f64).collect()),
                Some(dbeta.into_iter().map(T::from_f64).collect()),
            ]
        },
    )
}
