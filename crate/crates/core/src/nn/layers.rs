//! Forward and backward kernels for each layer kind.
//!
//! Activations are batch-major: `[batch, features]` or
//! `[batch, channels, height, width]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::Scalar;

pub(crate) struct DenseDims {
    pub batch: usize,
    pub inputs: usize,
    pub outputs: usize,
}

pub(crate) fn dense_forward<S: Scalar>(d: &DenseDims, x: &[S], w: &[S], b: &[S]) -> Vec<S> {
    let mut y = vec![S::zero(); d.batch * d.outputs];
    for n in 0..d.batch {
        let xr = &x[n * d.inputs..(n + 1) * d.inputs];
        for o in 0..d.outputs {
            let wr = &w[o * d.inputs..(o + 1) * d.inputs];
            let mut acc = b[o];
            for (wi, xi) in wr.iter().zip(xr) {
                acc = acc + *wi * *xi;
            }
            y[n * d.outputs + o] = acc;
        }
    }
    y
}

/// Returns `(dx, dw, db)`; parameter gradients are skipped when
/// `want_params` is false, the input gradient when `want_input` is false.
pub(crate) fn dense_backward<S: Scalar>(
    d: &DenseDims,
    x: &[S],
    w: &[S],
    dy: &[S],
    want_params: bool,
    want_input: bool,
) -> (Option<Vec<S>>, Option<(Vec<S>, Vec<S>)>) {
    let params = want_params.then(|| {
        let mut dw = vec![S::zero(); d.outputs * d.inputs];
        let mut db = vec![S::zero(); d.outputs];
        for n in 0..d.batch {
            let xr = &x[n * d.inputs..(n + 1) * d.inputs];
            for o in 0..d.outputs {
                let g = dy[n * d.outputs + o];
                db[o] = db[o] + g;
                let row = &mut dw[o * d.inputs..(o + 1) * d.inputs];
                for (dwi, xi) in row.iter_mut().zip(xr) {
                    *dwi = *dwi + g * *xi;
                }
            }
        }
        (dw, db)
    });
    let dx = want_input.then(|| {
        let mut dx = vec![S::zero(); d.batch * d.inputs];
        for n in 0..d.batch {
            let dxr = &mut dx[n * d.inputs..(n + 1) * d.inputs];
            for o in 0..d.outputs {
                let g = dy[n * d.outputs + o];
                let wr = &w[o * d.inputs..(o + 1) * d.inputs];
                for (dxi, wi) in dxr.iter_mut().zip(wr) {
                    *dxi = *dxi + g * *wi;
                }
            }
        }
        dx
    });
    (dx, params)
}

#[derive(Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    /// Input coordinate for output position `o` and kernel offset `k`, if it
    /// falls inside the unpadded input.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = o * self.stride + k;
        if pos < self.pad || pos - self.pad >= limit {
            None
        } else {
            Some(pos - self.pad)
        }
    }
}

pub(crate) fn conv_forward<S: Scalar>(d: &ConvDims, x: &[S], w: &[S], b: &[S]) -> Vec<S> {
    let in_plane = d.height * d.width;
    let out_plane = d.out_height * d.out_width;
    let kk = d.kernel * d.kernel;
    let mut y = vec![S::zero(); d.batch * d.out_channels * out_plane];
    for n in 0..d.batch {
        for co in 0..d.out_channels {
            let out = &mut y[(n * d.out_channels + co) * out_plane..][..out_plane];
            out.iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..d.in_channels {
                let xin = &x[(n * d.in_channels + ci) * in_plane..][..in_plane];
                let wk = &w[(co * d.in_channels + ci) * kk..][..kk];
                for oy in 0..d.out_height {
                    for ky in 0..d.kernel {
                        let Some(iy) = d.source(oy, ky, d.height) else { continue };
                        for ox in 0..d.out_width {
                            let mut acc = out[oy * d.out_width + ox];
                            for kx in 0..d.kernel {
                                if let Some(ix) = d.source(ox, kx, d.width) {
                                    acc = acc + wk[ky * d.kernel + kx] * xin[iy * d.width + ix];
                                }
                            }
                            out[oy * d.out_width + ox] = acc;
                        }
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn conv_backward<S: Scalar>(
    d: &ConvDims,
    x: &[S],
    w: &[S],
    dy: &[S],
    want_params: bool,
    want_input: bool,
) -> (Option<Vec<S>>, Option<(Vec<S>, Vec<S>)>) {
    let in_plane = d.height * d.width;
    let out_plane = d.out_height * d.out_width;
    let kk = d.kernel * d.kernel;
    let mut dw = want_params.then(|| vec![S::zero(); w.len()]);
    let mut db = want_params.then(|| vec![S::zero(); d.out_channels]);
    let mut dx = want_input.then(|| vec![S::zero(); x.len()]);
    for n in 0..d.batch {
        for co in 0..d.out_channels {
            let g = &dy[(n * d.out_channels + co) * out_plane..][..out_plane];
            if let Some(db) = db.as_mut() {
                db[co] = db[co] + g.iter().copied().sum::<S>();
            }
            for ci in 0..d.in_channels {
                let xoff = (n * d.in_channels + ci) * in_plane;
                let woff = (co * d.in_channels + ci) * kk;
                for oy in 0..d.out_height {
                    for ky in 0..d.kernel {
                        let Some(iy) = d.source(oy, ky, d.height) else { continue };
                        for ox in 0..d.out_width {
                            let go = g[oy * d.out_width + ox];
                            for kx in 0..d.kernel {
                                let Some(ix) = d.source(ox, kx, d.width) else { continue };
                                let xi = xoff + iy * d.width + ix;
                                let wi = woff + ky * d.kernel + kx;
                                if let Some(dw) = dw.as_mut() {
                                    dw[wi] = dw[wi] + go * x[xi];
                                }
                                if let Some(dx) = dx.as_mut() {
                                    dx[xi] = dx[xi] + go * w[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw.zip(db))
}

/// Per-channel layout helper: `groups` is the batch size, `inner` is the
/// spatial plane size (1 for flat features).
#[derive(Clone, Copy)]
pub(crate) struct ChannelDims {
    pub batch: usize,
    pub channels: usize,
    pub inner: usize,
}

impl ChannelDims {
    #[inline]
    fn for_each_in_channel(&self, c: usize, mut f: impl FnMut(usize)) {
        for n in 0..self.batch {
            let base = (n * self.channels + c) * self.inner;
            for i in base..base + self.inner {
                f(i);
            }
        }
    }

    fn count(&self) -> usize {
        self.batch * self.inner
    }
}

pub(crate) struct BatchNormCache<S> {
    pub normalized: Vec<S>,
    pub inv_std: Vec<S>,
    pub batch_mean: Vec<S>,
    pub batch_var: Vec<S>,
    pub uses_batch_stats: bool,
}

/// `stats` is `Some((mean, var))` to normalise with fixed statistics, or
/// `None` to use the batch's own (biased) mean and variance.
pub(crate) fn batch_norm_forward<S: Scalar>(
    d: &ChannelDims,
    x: &[S],
    gamma: &[S],
    beta: &[S],
    stats: Option<(&[S], &[S])>,
    eps: S,
) -> (Vec<S>, BatchNormCache<S>) {
    let m = S::from_f64(d.count() as f64);
    let mut batch_mean = vec![S::zero(); d.channels];
    let mut batch_var = vec![S::zero(); d.channels];
    let mut inv_std = vec![S::zero(); d.channels];
    let mut normalized = vec![S::zero(); x.len()];
    let mut y = vec![S::zero(); x.len()];
    for c in 0..d.channels {
        let mut sum = S::zero();
        d.for_each_in_channel(c, |i| sum = sum + x[i]);
        let mean = sum / m;
        let mut sq = S::zero();
        d.for_each_in_channel(c, |i| sq = sq + (x[i] - mean) * (x[i] - mean));
        batch_mean[c] = mean;
        batch_var[c] = sq / m;
        let (mu, var) = match stats {
            Some((rm, rv)) => (rm[c], rv[c]),
            None => (mean, batch_var[c]),
        };
        let is = S::one() / (var + eps).sqrt();
        inv_std[c] = is;
        d.for_each_in_channel(c, |i| {
            let xh = (x[i] - mu) * is;
            normalized[i] = xh;
            y[i] = gamma[c] * xh + beta[c];
        });
    }
    let cache =
        BatchNormCache { normalized, inv_std, batch_mean, batch_var, uses_batch_stats: stats.is_none() };
    (y, cache)
}

pub(crate) fn batch_norm_backward<S: Scalar>(
    d: &ChannelDims,
    cache: &BatchNormCache<S>,
    gamma: &[S],
    dy: &[S],
    want_params: bool,
    want_input: bool,
) -> (Option<Vec<S>>, Option<(Vec<S>, Vec<S>)>) {
    let m = S::from_f64(d.count() as f64);
    let mut dgamma = vec![S::zero(); d.channels];
    let mut dbeta = vec![S::zero(); d.channels];
    for c in 0..d.channels {
        d.for_each_in_channel(c, |i| {
            dgamma[c] = dgamma[c] + dy[i] * cache.normalized[i];
            dbeta[c] = dbeta[c] + dy[i];
        });
    }
    let dx = want_input.then(|| {
        let mut dx = vec![S::zero(); dy.len()];
        for c in 0..d.channels {
            let scale = gamma[c] * cache.inv_std[c];
            if cache.uses_batch_stats {
                d.for_each_in_channel(c, |i| {
                    dx[i] = scale / m * (m * dy[i] - dbeta[c] - cache.normalized[i] * dgamma[c]);
                });
            } else {
                d.for_each_in_channel(c, |i| dx[i] = scale * dy[i]);
            }
        }
        dx
    });
    (dx, want_params.then_some((dgamma, dbeta)))
}

#[derive(Clone, Copy)]
pub(crate) struct PoolDims {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub size: usize,
}

impl PoolDims {
    fn out_h(&self) -> usize {
        self.height / self.size
    }
    fn out_w(&self) -> usize {
        self.width / self.size
    }
}

/// Returns pooled values and the flat input index of each window's maximum.
pub(crate) fn max_pool_forward<S: Scalar>(d: &PoolDims, x: &[S]) -> (Vec<S>, Vec<usize>) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut y = Vec::with_capacity(d.planes * oh * ow);
    let mut arg = Vec::with_capacity(d.planes * oh * ow);
    for p in 0..d.planes {
        let base = p * d.height * d.width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * d.size * d.width + ox * d.size;
                for ky in 0..d.size {
                    for kx in 0..d.size {
                        let i = base + (oy * d.size + ky) * d.width + ox * d.size + kx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

pub(crate) fn max_pool_backward<S: Scalar>(input_len: usize, arg: &[usize], dy: &[S]) -> Vec<S> {
    let mut dx = vec![S::zero(); input_len];
    for (&i, &g) in arg.iter().zip(dy) {
        dx[i] = dx[i] + g;
    }
    dx
}

pub(crate) fn avg_pool_forward<S: Scalar>(d: &PoolDims, x: &[S]) -> Vec<S> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let area = S::from_f64((d.size * d.size) as f64);
    let mut y = Vec::with_capacity(d.planes * oh * ow);
    for p in 0..d.planes {
        let base = p * d.height * d.width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = S::zero();
                for ky in 0..d.size {
                    for kx in 0..d.size {
                        acc = acc + x[base + (oy * d.size + ky) * d.width + ox * d.size + kx];
                    }
                }
                y.push(acc / area);
            }
        }
    }
    y
}

pub(crate) fn avg_pool_backward<S: Scalar>(d: &PoolDims, dy: &[S]) -> Vec<S> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let area = S::from_f64((d.size * d.size) as f64);
    let mut dx = vec![S::zero(); d.planes * d.height * d.width];
    for p in 0..d.planes {
        let base = p * d.height * d.width;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[(p * oh + oy) * ow + ox] / area;
                for ky in 0..d.size {
                    for kx in 0..d.size {
                        dx[base + (oy * d.size + ky) * d.width + ox * d.size + kx] = g;
                    }
                }
            }
        }
    }
    dx
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_forward<S: Scalar>(rows: usize, cols: usize, x: &[S]) -> Vec<S> {
    let mut y = vec![S::zero(); x.len()];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let max = xr.iter().copied().fold(S::neg_infinity(), S::max);
        let yr = &mut y[r * cols..(r + 1) * cols];
        let mut sum = S::zero();
        for (yi, xi) in yr.iter_mut().zip(xr) {
            *yi = (*xi - max).exp();
            sum = sum + *yi;
        }
        yr.iter_mut().for_each(|v| *v = *v / sum);
    }
    y
}

pub(crate) fn softmax_backward<S: Scalar>(rows: usize, cols: usize, p: &[S], dy: &[S]) -> Vec<S> {
    let mut dx = vec![S::zero(); p.len()];
    for r in 0..rows {
        let pr = &p[r * cols..(r + 1) * cols];
        let gr = &dy[r * cols..(r + 1) * cols];
        let dot: S = pr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
        for c in 0..cols {
            dx[r * cols + c] = pr[c] * (gr[c] - dot);
        }
    }
    dx
}
