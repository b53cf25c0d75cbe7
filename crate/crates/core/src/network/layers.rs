//! Convolution, batch normalization, rectifier, pooling and linear layers with
//! hand-written backward passes. Activations are `N x C x S` row-major, where `S` is the
//! flattened spatial extent (1 for vectors).

use crate::tensor::{gemm, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

pub struct ConvCache {
    cols: Vec<Vec<f64>>,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
}

fn im2col(spec: &ConvSpec, x: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let k = spec.kernel;
    let p = oh * ow;
    let mut cols = vec![0.0; spec.patch_len() * p];
    for ci in 0..spec.in_channels {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    let dst = &mut row[oy * ow..][..ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(spec: &ConvSpec, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
    let k = spec.kernel;
    let p = oh * ow;
    for ci in 0..spec.in_channels {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Bias-free 2-D convolution of `input [N, Cin, H, W]` with `weight [Cout, Cin, k, k]`.
pub fn conv2d_forward(spec: &ConvSpec, input: &Tensor, weight: &Tensor) -> (Tensor, ConvCache) {
    let (n, h, w) = (input.dim(0), input.dim(2), input.dim(3));
    debug_assert_eq!(input.dim(1), spec.in_channels);
    let (oh, ow) = spec.output_size(h, w);
    let p = oh * ow;
    let mut out = Tensor::zeros(&[n, spec.out_channels, oh, ow]);
    let mut cols_all = Vec::with_capacity(n);
    for i in 0..n {
        let cols = im2col(spec, input.row(i), h, w, oh, ow);
        gemm(
            spec.out_channels,
            spec.patch_len(),
            p,
            1.0,
            weight.data(),
            false,
            &cols,
            false,
            0.0,
            out.row_mut(i),
        );
        cols_all.push(cols);
    }
    (
        out,
        ConvCache {
            cols: cols_all,
            in_hw: (h, w),
            out_hw: (oh, ow),
        },
    )
}

/// Returns `(d_input, d_weight)`; `d_input` is skipped when not needed.
pub fn conv2d_backward(
    spec: &ConvSpec,
    cache: &ConvCache,
    weight: &Tensor,
    d_out: &Tensor,
    need_input_grad: bool,
) -> (Option<Tensor>, Tensor) {
    let n = d_out.dim(0);
    let (h, w) = cache.in_hw;
    let (oh, ow) = cache.out_hw;
    let p = oh * ow;
    let j = spec.patch_len();
    let mut d_w = Tensor::zeros(&spec.weight_shape());
    let mut d_in = need_input_grad.then(|| Tensor::zeros(&[n, spec.in_channels, h, w]));
    let mut d_cols = vec![0.0; j * p];
    for i in 0..n {
        let dy = d_out.row(i);
        gemm(spec.out_channels, p, j, 1.0, dy, false, &cache.cols[i], true, 1.0, d_w.data_mut());
        if let Some(d_in) = d_in.as_mut() {
            gemm(j, spec.out_channels, p, 1.0, weight.data(), true, dy, false, 0.0, &mut d_cols);
            col2im(spec, &d_cols, h, w, oh, ow, d_in.row_mut(i));
        }
    }
    (d_in, d_w)
}

pub struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    n: usize,
    c: usize,
    s: usize,
    train: bool,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance, the quantity folded into running statistics.
    pub batch_var: Vec<f64>,
}

/// Batch normalization over `N x S` per channel using batch statistics.
pub fn batchnorm_train(
    x: &[f64],
    (n, c, s): (usize, usize, usize),
    gamma: &[f64],
    beta: Option<&[f64]>,
) -> (Vec<f64>, BnCache) {
    let m = (n * s) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let seg = &x[(i * c + ch) * s..][..s];
            mean[ch] += seg.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for i in 0..n {
        for ch in 0..c {
            let seg = &x[(i * c + ch) * s..][..s];
            var[ch] += seg.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    let biased: Vec<f64> = var.iter().map(|v| v / m).collect();
    let unbiased: Vec<f64> = if m > 1.0 {
        var.iter().map(|v| v / (m - 1.0)).collect()
    } else {
        biased.clone()
    };
    let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let (y, xhat) = bn_apply(x, (n, c, s), &mean, &inv_std, gamma, beta);
    (
        y,
        BnCache {
            xhat,
            inv_std,
            n,
            c,
            s,
            train: true,
            batch_mean: mean,
            batch_var: unbiased,
        },
    )
}

/// Batch normalization with fixed running statistics.
pub fn batchnorm_eval(
    x: &[f64],
    (n, c, s): (usize, usize, usize),
    gamma: &[f64],
    beta: Option<&[f64]>,
    running_mean: &[f64],
    running_var: &[f64],
) -> (Vec<f64>, BnCache) {
    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let (y, xhat) = bn_apply(x, (n, c, s), running_mean, &inv_std, gamma, beta);
    (
        y,
        BnCache {
            xhat,
            inv_std,
            n,
            c,
            s,
            train: false,
            batch_mean: Vec::new(),
            batch_var: Vec::new(),
        },
    )
}

fn bn_apply(
    x: &[f64],
    (n, c, s): (usize, usize, usize),
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * s;
            let b = beta.map_or(0.0, |b| b[ch]);
            for k in off..off + s {
                let xh = (x[k] - mean[ch]) * inv_std[ch];
                xhat[k] = xh;
                y[k] = gamma[ch] * xh + b;
            }
        }
    }
    (y, xhat)
}

/// Returns `(d_x, d_gamma, d_beta)`.
pub fn batchnorm_backward(cache: &BnCache, gamma: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, s) = (cache.n, cache.c, cache.s);
    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * s;
            for (g, xh) in dy[off..off + s].iter().zip(&cache.xhat[off..off + s]) {
                d_gamma[ch] += g * xh;
                d_beta[ch] += g;
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    let m = (n * s) as f64;
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * s;
            let scale = gamma[ch] * cache.inv_std[ch];
            for k in off..off + s {
                dx[k] = if cache.train {
                    scale * (dy[k] - d_beta[ch] / m - cache.xhat[k] * d_gamma[ch] / m)
                } else {
                    scale * dy[k]
                };
            }
        }
    }
    (dx, d_gamma, d_beta)
}

pub fn update_running_stats(running_mean: &mut [f64], running_var: &mut [f64], cache: &BnCache) {
    if !cache.train {
        return;
    }
    for ch in 0..cache.c {
        running_mean[ch] = (1.0 - BN_MOMENTUM) * running_mean[ch] + BN_MOMENTUM * cache.batch_mean[ch];
        running_var[ch] = (1.0 - BN_MOMENTUM) * running_var[ch] + BN_MOMENTUM * cache.batch_var[ch];
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through a rectifier, given its output.
pub fn relu_backward(out: &[f64], dy: &mut [f64]) {
    for (d, o) in dy.iter_mut().zip(out) {
        if *o <= 0.0 {
            *d = 0.0;
        }
    }
}

/// `[N, C, H, W] -> [N, C]` spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (n, c) = (x.dim(0), x.dim(1));
    let s = x.len() / (n * c);
    let data = x
        .data()
        .chunks(s)
        .map(|seg| seg.iter().sum::<f64>() / s as f64)
        .collect();
    Tensor::from_vec(&[n, c], data)
}

/// Adds the pooling gradient `d_pooled [N, C]` into `d_x [N, C, H, W]`.
pub fn global_avg_pool_backward(d_pooled: &Tensor, d_x: &mut Tensor) {
    let (n, c) = (d_x.dim(0), d_x.dim(1));
    let s = d_x.len() / (n * c);
    for (seg, g) in d_x.data_mut().chunks_mut(s).zip(d_pooled.data()) {
        let v = g / s as f64;
        seg.iter_mut().for_each(|d| *d += v);
    }
}

/// `y = x W^T` for `x [N, C]`, `W [M, C]`.
pub fn linear_forward(x: &Tensor, weight: &Tensor) -> Tensor {
    let (n, c, m) = (x.dim(0), x.dim(1), weight.dim(0));
    let mut y = Tensor::zeros(&[n, m]);
    gemm(n, c, m, 1.0, x.data(), false, weight.data(), true, 0.0, y.data_mut());
    y
}

/// Returns `(d_x, d_weight)`.
pub fn linear_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let (n, c, m) = (x.dim(0), x.dim(1), weight.dim(0));
    let mut dx = Tensor::zeros(&[n, c]);
    gemm(n, m, c, 1.0, dy.data(), false, weight.data(), false, 0.0, dx.data_mut());
    let mut dw = Tensor::zeros(&[m, c]);
    gemm(m, n, c, 1.0, dy.data(), true, x.data(), false, 0.0, dw.data_mut());
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    fn naive_conv(spec: &ConvSpec, x: &Tensor, w: &Tensor) -> Tensor {
        let (n, h, wd) = (x.dim(0), x.dim(2), x.dim(3));
        let (oh, ow) = spec.output_size(h, wd);
        let k = spec.kernel;
        let mut out = Tensor::zeros(&[n, spec.out_channels, oh, ow]);
        for i in 0..n {
            for co in 0..spec.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..spec.in_channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((i * spec.in_channels + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((co * spec.in_channels + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((i * spec.out_channels + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        for stride in [1, 2] {
            let spec = ConvSpec {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride,
                pad: 1,
            };
            let x = Tensor::from_vec(&[2, 2, 6, 5], lcg(1, 120));
            let w = Tensor::from_vec(&spec.weight_shape(), lcg(2, 54));
            let (y, _) = conv2d_forward(&spec, &x, &w);
            assert!(y.max_abs_diff(&naive_conv(&spec, &x, &w)) < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let spec = ConvSpec {
            in_channels: 2,
            out_channels: 2,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x = Tensor::from_vec(&[1, 2, 5, 4], lcg(3, 40));
        let w = Tensor::from_vec(&spec.weight_shape(), lcg(4, 36));
        let (y, cache) = conv2d_forward(&spec, &x, &w);
        let g = Tensor::from_vec(y.shape(), lcg(5, y.len()));
        let loss = |x: &Tensor, w: &Tensor| -> f64 {
            let (y, _) = conv2d_forward(&spec, x, w);
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let (dx, dw) = conv2d_backward(&spec, &cache, &w, &g, true);
        let dx = dx.unwrap();
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 1e-7);
        }
        for idx in 0..w.len() {
            let mut wp = w.clone();
            wp.data_mut()[idx] += h;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            assert!((fd - dw.data()[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn batchnorm_train_backward_matches_finite_differences() {
        let dims = (3, 2, 4);
        let x = lcg(7, 24);
        let gamma = vec![1.3, 0.7];
        let beta = vec![0.1, -0.2];
        let g = lcg(8, 24);
        let loss = |x: &[f64], gamma: &[f64], beta: &[f64]| -> f64 {
            let (y, _) = batchnorm_train(x, dims, gamma, Some(beta));
            y.iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = batchnorm_train(&x, dims, &gamma, Some(&beta));
        let (dx, dgamma, dbeta) = batchnorm_backward(&cache, &gamma, &g);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut p = x.clone();
            p[i] += h;
            let mut m = x.clone();
            m[i] -= h;
            let fd = (loss(&p, &gamma, &beta) - loss(&m, &gamma, &beta)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6, "{fd} vs {}", dx[i]);
        }
        for c in 0..2 {
            let mut p = gamma.clone();
            p[c] += h;
            let mut m = gamma.clone();
            m[c] -= h;
            let fd = (loss(&x, &p, &beta) - loss(&x, &m, &beta)) / (2.0 * h);
            assert!((fd - dgamma[c]).abs() < 1e-6);
            let mut p = beta.clone();
            p[c] += h;
            let mut m = beta.clone();
            m[c] -= h;
            let fd = (loss(&x, &gamma, &p) - loss(&x, &gamma, &m)) / (2.0 * h);
            assert!((fd - dbeta[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_normalizes_and_tracks_running_stats() {
        let x = vec![1.0, 3.0, 5.0, 7.0];
        let (y, cache) = batchnorm_train(&x, (4, 1, 1), &[1.0], None);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        update_running_stats(&mut rm, &mut rv, &cache);
        assert!((rm[0] - 0.4).abs() < 1e-12);
        // unbiased var of {1,3,5,7} is 20/3
        assert!((rv[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let x = Tensor::from_vec(&[3, 4], lcg(9, 12));
        let w = Tensor::from_vec(&[2, 4], lcg(10, 8));
        let g = Tensor::from_vec(&[3, 2], lcg(11, 6));
        let (dx, dw) = linear_backward(&x, &w, &g);
        let loss = |x: &Tensor, w: &Tensor| -> f64 {
            linear_forward(x, w).data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..8 {
            let mut p = w.clone();
            p.data_mut()[i] += h;
            let mut m = w.clone();
            m.data_mut()[i] -= h;
            assert!(((loss(&x, &p) - loss(&x, &m)) / (2.0 * h) - dw.data()[i]).abs() < 1e-8);
        }
        for i in 0..12 {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            assert!(((loss(&p, &w) - loss(&m, &w)) / (2.0 * h) - dx.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn pooling_round_trip() {
        let x = Tensor::from_vec(&[1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 8.0]);
        assert_eq!(global_avg_pool(&x).data(), &[2.5, 2.0]);
        let mut dx = Tensor::zeros(x.shape());
        global_avg_pool_backward(&Tensor::from_vec(&[1, 2], vec![4.0, 8.0]), &mut dx);
        assert_eq!(dx.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }
}
