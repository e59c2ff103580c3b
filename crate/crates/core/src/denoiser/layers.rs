//! Forward and backward kernels for the U-Net building blocks.

use super::tensor::Tensor3;

pub const BN_EPS: f64 = 1e-5;

/// Same-padded 1-D convolution. Offsets index the flat parameter vector;
/// weights are laid out `[out][in][k]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1d {
    pub weight: usize,
    pub bias: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv1d {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel
    }

    /// Valid output range for a tap with the given shift.
    #[inline]
    fn span(len: usize, shift: isize) -> (usize, usize) {
        let lo = (-shift).max(0) as usize;
        let hi = (len as isize - shift).clamp(0, len as isize) as usize;
        (lo, hi.max(lo))
    }

    pub fn forward(&self, p: &[f64], x: &Tensor3) -> Tensor3 {
        debug_assert_eq!(x.channels, self.cin);
        let len = x.len;
        let pad = (self.kernel / 2) as isize;
        let mut y = Tensor3::zeros(x.batch, self.cout, len);
        let w = &p[self.weight..self.weight + self.weight_len()];
        for b in 0..x.batch {
            for o in 0..self.cout {
                let bias = p[self.bias + o];
                let yi = y.idx(b, o, 0);
                let out = &mut y.data[yi..yi + len];
                out.fill(bias);
                for i in 0..self.cin {
                    let xr = x.row(b, i);
                    for k in 0..self.kernel {
                        let wk = w[(o * self.cin + i) * self.kernel + k];
                        if wk == 0.0 {
                            continue;
                        }
                        let shift = k as isize - pad;
                        let (lo, hi) = Self::span(len, shift);
                        let src = &xr[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                        for (o_, s) in out[lo..hi].iter_mut().zip(src) {
                            *o_ += wk * s;
                        }
                    }
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `g` and returns the input gradient.
    pub fn backward(&self, p: &[f64], x: &Tensor3, dy: &Tensor3, g: &mut [f64]) -> Tensor3 {
        let len = x.len;
        let pad = (self.kernel / 2) as isize;
        let mut dx = Tensor3::zeros(x.batch, self.cin, len);
        let w = &p[self.weight..self.weight + self.weight_len()];
        for b in 0..x.batch {
            for o in 0..self.cout {
                let dyr = dy.row(b, o);
                g[self.bias + o] += dyr.iter().sum::<f64>();
                for i in 0..self.cin {
                    let xr = x.row(b, i);
                    let dxi = dx.idx(b, i, 0);
                    for k in 0..self.kernel {
                        let widx = (o * self.cin + i) * self.kernel + k;
                        let shift = k as isize - pad;
                        let (lo, hi) = Self::span(len, shift);
                        let s0 = (lo as isize + shift) as usize;
                        let s1 = (hi as isize + shift) as usize;
                        let mut acc = 0.0;
                        for (d, s) in dyr[lo..hi].iter().zip(&xr[s0..s1]) {
                            acc += d * s;
                        }
                        g[self.weight + widx] += acc;
                        let wk = w[widx];
                        if wk != 0.0 {
                            for (dxv, d) in dx.data[dxi + s0..dxi + s1].iter_mut().zip(&dyr[lo..hi]) {
                                *dxv += wk * d;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Per-channel batch normalisation over the batch and length axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNorm1d {
    pub gamma: usize,
    pub beta: usize,
    /// Offset of the running means in the buffer vector; variances follow.
    pub running: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Tensor3,
    inv_std: Vec<f64>,
}

/// Batch moments observed during a training forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNorm1d {
    pub fn forward_train(&self, p: &[f64], x: &Tensor3) -> (Tensor3, BnCache, BnBatchStats) {
        let n = (x.batch * x.len) as f64;
        let mut mean = vec![0.0; self.channels];
        let mut var = vec![0.0; self.channels];
        for c in 0..self.channels {
            let mut s = 0.0;
            for b in 0..x.batch {
                s += x.row(b, c).iter().sum::<f64>();
            }
            let m = s / n;
            let mut v = 0.0;
            for b in 0..x.batch {
                v += x.row(b, c).iter().map(|a| (a - m) * (a - m)).sum::<f64>();
            }
            mean[c] = m;
            var[c] = v / n;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = x.clone();
        let mut y = Tensor3::zeros(x.batch, x.channels, x.len);
        for b in 0..x.batch {
            for c in 0..self.channels {
                let (g, be) = (p[self.gamma + c], p[self.beta + c]);
                let (m, is) = (mean[c], inv_std[c]);
                let xi = xhat.idx(b, c, 0);
                for l in 0..x.len {
                    let h = (xhat.data[xi + l] - m) * is;
                    xhat.data[xi + l] = h;
                    y.data[xi + l] = g * h + be;
                }
            }
        }
        (y, BnCache { xhat, inv_std }, BnBatchStats { mean, var })
    }

    pub fn forward_eval(&self, p: &[f64], buffers: &[f64], x: &Tensor3) -> Tensor3 {
        let mut y = x.clone();
        for c in 0..self.channels {
            let m = buffers[self.running + c];
            let is = 1.0 / (buffers[self.running + self.channels + c] + BN_EPS).sqrt();
            let (g, be) = (p[self.gamma + c], p[self.beta + c]);
            for b in 0..x.batch {
                for v in y.row_mut(b, c) {
                    *v = g * (*v - m) * is + be;
                }
            }
        }
        y
    }

    pub fn backward(&self, p: &[f64], cache: &BnCache, dy: &Tensor3, g: &mut [f64]) -> Tensor3 {
        let n = (dy.batch * dy.len) as f64;
        let mut dx = Tensor3::zeros(dy.batch, dy.channels, dy.len);
        for c in 0..self.channels {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for b in 0..dy.batch {
                for (d, h) in dy.row(b, c).iter().zip(cache.xhat.row(b, c)) {
                    sum_dy += d;
                    sum_dy_xhat += d * h;
                }
            }
            g[self.gamma + c] += sum_dy_xhat;
            g[self.beta + c] += sum_dy;
            let k = p[self.gamma + c] * cache.inv_std[c] / n;
            for b in 0..dy.batch {
                let i = dx.idx(b, c, 0);
                let dyr = dy.row(b, c);
                let hr = cache.xhat.row(b, c);
                for l in 0..dy.len {
                    dx.data[i + l] = k * (n * dyr[l] - sum_dy - hr[l] * sum_dy_xhat);
                }
            }
        }
        dx
    }

    pub fn update_running(&self, buffers: &mut [f64], stats: &BnBatchStats, momentum: f64) {
        for c in 0..self.channels {
            let m = &mut buffers[self.running + c];
            *m = (1.0 - momentum) * *m + momentum * stats.mean[c];
            let v = &mut buffers[self.running + self.channels + c];
            *v = (1.0 - momentum) * *v + momentum * stats.var[c];
        }
    }
}

pub fn relu(x: &Tensor3) -> Tensor3 {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient through ReLU given its output.
pub fn relu_backward(out: &Tensor3, dy: &Tensor3) -> Tensor3 {
    let mut dx = dy.clone();
    for (d, o) in dx.data.iter_mut().zip(&out.data) {
        if *o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Max-pool with window and stride 2; returns the pooled tensor and which
/// element of each pair won (0 or 1, first on ties).
pub fn max_pool2(x: &Tensor3) -> (Tensor3, Vec<u8>) {
    let half = x.len / 2;
    let mut y = Tensor3::zeros(x.batch, x.channels, half);
    let mut arg = vec![0u8; y.data.len()];
    for (j, (out, a)) in y.data.iter_mut().zip(arg.iter_mut()).enumerate() {
        let row = j / half;
        let l = j % half;
        let base = row * x.len + 2 * l;
        let (p, q) = (x.data[base], x.data[base + 1]);
        if q > p {
            *out = q;
            *a = 1;
        } else {
            *out = p;
        }
    }
    (y, arg)
}

pub fn max_pool2_backward(arg: &[u8], dy: &Tensor3) -> Tensor3 {
    let len = dy.len * 2;
    let mut dx = Tensor3::zeros(dy.batch, dy.channels, len);
    for (j, (d, a)) in dy.data.iter().zip(arg).enumerate() {
        let row = j / dy.len;
        let l = j % dy.len;
        dx.data[row * len + 2 * l + *a as usize] = *d;
    }
    dx
}

/// Nearest-neighbour upsampling by a factor of two.
pub fn upsample2(x: &Tensor3) -> Tensor3 {
    let mut y = Tensor3::zeros(x.batch, x.channels, x.len * 2);
    for (j, v) in y.data.iter_mut().enumerate() {
        *v = x.data[j / 2];
    }
    y
}

pub fn upsample2_backward(dy: &Tensor3) -> Tensor3 {
    let mut dx = Tensor3::zeros(dy.batch, dy.channels, dy.len / 2);
    for (j, v) in dx.data.iter_mut().enumerate() {
        *v = dy.data[2 * j] + dy.data[2 * j + 1];
    }
    dx
}

/// Concatenate feature maps along channels, then append `emb` (one vector
/// of `emb_dim` per sample) broadcast along the length axis.
pub fn concat_with_embedding(parts: &[&Tensor3], emb: &[f64], emb_dim: usize) -> Tensor3 {
    let batch = parts[0].batch;
    let len = parts[0].len;
    let channels: usize = parts.iter().map(|t| t.channels).sum::<usize>() + emb_dim;
    let mut y = Tensor3::zeros(batch, channels, len);
    for b in 0..batch {
        let mut c0 = 0;
        for t in parts {
            let n = t.channels * len;
            let dst = y.idx(b, c0, 0);
            y.data[dst..dst + n].copy_from_slice(t.sample(b));
            c0 += t.channels;
        }
        for e in 0..emb_dim {
            y.row_mut(b, c0 + e).fill(emb[b * emb_dim + e]);
        }
    }
    y
}

/// Split the gradient of a concatenation; embedding gradients are summed
/// over length and accumulated into `demb`.
pub fn concat_with_embedding_backward(
    dy: &Tensor3,
    part_channels: &[usize],
    emb_dim: usize,
    demb: &mut [f64],
) -> Vec<Tensor3> {
    let mut outs: Vec<Tensor3> = part_channels
        .iter()
        .map(|&c| Tensor3::zeros(dy.batch, c, dy.len))
        .collect();
    for b in 0..dy.batch {
        let mut c0 = 0;
        for t in outs.iter_mut() {
            let n = t.channels * dy.len;
            let src = dy.idx(b, c0, 0);
            t.sample_mut(b).copy_from_slice(&dy.data[src..src + n]);
            c0 += t.channels;
        }
        for e in 0..emb_dim {
            demb[b * emb_dim + e] += dy.row(b, c0 + e).iter().sum::<f64>();
        }
    }
    outs
}
