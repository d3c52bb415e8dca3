//! Dilated convolution, batch normalization and activations with their
//! backward passes.
//!
//! Convolution uses "same" zero padding. Each sample is copied into a padded
//! buffer of width `wp = w + 2·pad`; an output row then spans `wp` columns, so
//! every kernel tap is a single GEMM over a contiguous window of the padded
//! input. The `2·pad` trailing columns of each row are discarded.

use super::real::{gemm, Real, View};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvShape {
    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.taps()
    }

    fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }
}

struct Padded {
    pad: usize,
    wp: usize,
    plane: usize,
}

impl Padded {
    fn new(shape: &ConvShape, h: usize, w: usize) -> Self {
        let pad = shape.pad();
        let wp = w + 2 * pad;
        // one extra row keeps the last tap's window inside the buffer
        let hp = h + 2 * pad + 1;
        Padded {
            pad,
            wp,
            plane: hp * wp,
        }
    }

    fn tap_offset(&self, shape: &ConvShape, tap: usize) -> usize {
        let (ky, kx) = (tap / shape.kernel, tap % shape.kernel);
        ky * shape.dilation * self.wp + kx * shape.dilation
    }

    fn fill<T: Real>(&self, src: &[T], channels: usize, h: usize, w: usize) -> Vec<T> {
        let mut buf = vec![T::zero(); channels * self.plane];
        for c in 0..channels {
            for y in 0..h {
                let s = &src[(c * h + y) * w..(c * h + y + 1) * w];
                let d0 = c * self.plane + (y + self.pad) * self.wp + self.pad;
                buf[d0..d0 + w].copy_from_slice(s);
            }
        }
        buf
    }
}

pub(crate) fn conv_forward<T: Real>(
    x: &Tensor<T>,
    shape: &ConvShape,
    weight: &[T],
    bias: Option<&[T]>,
) -> Tensor<T> {
    assert_eq!(x.channels, shape.cin);
    let (h, w) = (x.height, x.width);
    let geo = Padded::new(shape, h, w);
    let cols = h * geo.wp;
    let mut out = Tensor::zeros(x.batch, shape.cout, h, w);
    let mut acc = vec![T::zero(); shape.cout * cols];
    let kk = shape.taps();
    for n in 0..x.batch {
        let xp = geo.fill(x.sample(n), shape.cin, h, w);
        for tap in 0..kk {
            let beta = if tap == 0 { T::zero() } else { T::one() };
            gemm(
                shape.cout,
                shape.cin,
                cols,
                T::one(),
                weight,
                View::new(tap, shape.cin * kk, kk),
                &xp,
                View::new(geo.tap_offset(shape, tap), geo.plane, 1),
                beta,
                &mut acc,
                View::new(0, cols, 1),
            );
        }
        let o = out.sample_mut(n);
        for co in 0..shape.cout {
            let b = bias.map_or(T::zero(), |b| b[co]);
            for y in 0..h {
                let src = &acc[co * cols + y * geo.wp..co * cols + y * geo.wp + w];
                let dst = &mut o[(co * h + y) * w..(co * h + y + 1) * w];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
    }
    out
}

/// Accumulates weight (and bias) gradients; returns the input gradient when
/// requested.
pub(crate) fn conv_backward<T: Real>(
    x: &Tensor<T>,
    shape: &ConvShape,
    weight: &[T],
    dy: &Tensor<T>,
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let (h, w) = (x.height, x.width);
    let geo = Padded::new(shape, h, w);
    let cols = h * geo.wp;
    let kk = shape.taps();
    let mut dx = need_dx.then(|| Tensor::zeros(x.batch, shape.cin, h, w));
    let mut dyp = vec![T::zero(); shape.cout * cols];
    let mut dbias = dbias;
    for n in 0..x.batch {
        let d = dy.sample(n);
        for co in 0..shape.cout {
            for y in 0..h {
                let src = &d[(co * h + y) * w..(co * h + y + 1) * w];
                let off = co * cols + y * geo.wp;
                dyp[off..off + w].copy_from_slice(src);
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            for co in 0..shape.cout {
                let s = d[co * h * w..(co + 1) * h * w]
                    .iter()
                    .fold(T::zero(), |a, &v| a + v);
                db[co] = db[co] + s;
            }
        }
        let xp = geo.fill(x.sample(n), shape.cin, h, w);
        let mut dxp = need_dx.then(|| vec![T::zero(); shape.cin * geo.plane]);
        for tap in 0..kk {
            let off = geo.tap_offset(shape, tap);
            // dW[co, ci, tap] += Σ_q dy[co, q] · xp[ci, off + q]
            gemm(
                shape.cout,
                cols,
                shape.cin,
                T::one(),
                &dyp,
                View::new(0, cols, 1),
                &xp,
                View::new(off, 1, geo.plane),
                T::one(),
                dweight,
                View::new(tap, shape.cin * kk, kk),
            );
            if let Some(buf) = dxp.as_mut() {
                // dxp[ci, off + q] += Σ_co W[co, ci, tap] · dy[co, q]
                gemm(
                    shape.cin,
                    shape.cout,
                    cols,
                    T::one(),
                    weight,
                    View::new(tap, kk, shape.cin * kk),
                    &dyp,
                    View::new(0, cols, 1),
                    T::one(),
                    buf,
                    View::new(off, geo.plane, 1),
                );
            }
        }
        if let (Some(buf), Some(dx)) = (dxp, dx.as_mut()) {
            let o = dx.sample_mut(n);
            for ci in 0..shape.cin {
                for y in 0..h {
                    let s0 = ci * geo.plane + (y + geo.pad) * geo.wp + geo.pad;
                    o[(ci * h + y) * w..(ci * h + y + 1) * w].copy_from_slice(&buf[s0..s0 + w]);
                }
            }
        }
    }
    dx
}

/// Cached normalized activations of a training-mode batch norm.
#[derive(Debug, Clone)]
pub(crate) struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Batch statistics over (N, H, W) per channel.
pub(crate) fn bn_forward_train<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Tensor<T>, BnCache<T>, Vec<f64>, Vec<f64>) {
    let c = x.channels;
    let count = (x.batch * x.plane_len()) as f64;
    let mut means = vec![0.0; c];
    let mut vars = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for n in 0..x.batch {
            s += x.plane(n, ch).iter().map(|&v| v.into()).sum::<f64>();
        }
        let mean = s / count;
        let mut v = 0.0;
        for n in 0..x.batch {
            v += x
                .plane(n, ch)
                .iter()
                .map(|&u| {
                    let d = u.into() - mean;
                    d * d
                })
                .sum::<f64>();
        }
        means[ch] = mean;
        vars[ch] = v / count;
    }
    let inv_std: Vec<T> = vars.iter().map(|&v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
    let mut xhat = Tensor::zeros(x.batch, c, x.height, x.width);
    let mut y = Tensor::zeros(x.batch, c, x.height, x.width);
    for n in 0..x.batch {
        for ch in 0..c {
            let m = T::from_f64(means[ch]);
            let (g, b, is) = (gamma[ch], beta[ch], inv_std[ch]);
            let src = x.plane(n, ch);
            let xh = xhat.plane_mut(n, ch);
            for (d, &s) in xh.iter_mut().zip(src) {
                *d = (s - m) * is;
            }
            let xh = xhat.plane(n, ch).to_vec();
            for (d, v) in y.plane_mut(n, ch).iter_mut().zip(xh) {
                *d = g * v + b;
            }
        }
    }
    (y, BnCache { xhat, inv_std }, means, vars)
}

pub(crate) fn bn_forward_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: f64,
) -> Tensor<T> {
    let mut y = x.clone();
    for n in 0..x.batch {
        for ch in 0..x.channels {
            let is = T::from_f64(1.0 / (var[ch].into() + eps).sqrt());
            let (g, b, m) = (gamma[ch], beta[ch], mean[ch]);
            for v in y.plane_mut(n, ch) {
                *v = g * (*v - m) * is + b;
            }
        }
    }
    y
}

/// Returns dx and accumulates dgamma / dbeta.
pub(crate) fn bn_backward<T: Real>(
    dy: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let c = dy.channels;
    let count = (dy.batch * dy.plane_len()) as f64;
    let mut dx = Tensor::zeros(dy.batch, c, dy.height, dy.width);
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for n in 0..dy.batch {
            for (&d, &xh) in dy.plane(n, ch).iter().zip(cache.xhat.plane(n, ch)) {
                sum_dy += d.into();
                sum_dy_xhat += d.into() * xh.into();
            }
        }
        dgamma[ch] = dgamma[ch] + T::from_f64(sum_dy_xhat);
        dbeta[ch] = dbeta[ch] + T::from_f64(sum_dy);
        let scale = gamma[ch].into() * cache.inv_std[ch].into() / count;
        let (a, b) = (sum_dy, sum_dy_xhat);
        for n in 0..dy.batch {
            let xh = cache.xhat.plane(n, ch);
            let d = dy.plane(n, ch);
            for ((o, &g), &x) in dx.plane_mut(n, ch).iter_mut().zip(d).zip(xh) {
                *o = T::from_f64(scale * (count * g.into() - a - x.into() * b));
            }
        }
    }
    dx
}

pub(crate) fn elu_inplace<T: Real>(data: &mut [T]) {
    for v in data {
        if *v <= T::zero() {
            *v = v.exp() - T::one();
        }
    }
}

/// Gradient through ELU given its output `y`: 1 where `y > 0`, else `y + 1`.
pub(crate) fn elu_backward<T: Real>(dy: &mut [T], y: &[T]) {
    for (d, &o) in dy.iter_mut().zip(y) {
        if o <= T::zero() {
            *d = *d * (o + T::one());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution with zero padding.
    fn naive_conv(x: &Tensor<f64>, s: &ConvShape, w: &[f64], b: &[f64]) -> Tensor<f64> {
        let (h, wd) = (x.height, x.width);
        let r = (s.kernel / 2) as isize;
        let d = s.dilation as isize;
        let mut out = Tensor::zeros(x.batch, s.cout, h, wd);
        for n in 0..x.batch {
            for co in 0..s.cout {
                for y in 0..h as isize {
                    for xx in 0..wd as isize {
                        let mut acc = b[co];
                        for ci in 0..s.cin {
                            for ky in 0..s.kernel as isize {
                                for kx in 0..s.kernel as isize {
                                    let iy = y + (ky - r) * d;
                                    let ix = xx + (kx - r) * d;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let wi = ((co * s.cin + ci) * s.kernel + ky as usize)
                                        * s.kernel
                                        + kx as usize;
                                    acc += w[wi] * x.plane(n, ci)[iy as usize * wd + ix as usize];
                                }
                            }
                        }
                        out.plane_mut(n, co)[y as usize * wd + xx as usize] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive_for_dilations() {
        for (k, d) in [(1, 1), (3, 1), (3, 2), (5, 1), (5, 3)] {
            let s = ConvShape {
                cin: 3,
                cout: 2,
                kernel: k,
                dilation: d,
            };
            let x = Tensor::from_vec(2, 3, 7, 9, pseudo(2 * 3 * 63, 1));
            let w = pseudo(s.weight_len(), 2);
            let b = pseudo(2, 3);
            let got = conv_forward(&x, &s, &w, Some(&b));
            let want = naive_conv(&x, &s, &w, &b);
            for (a, e) in got.data.iter().zip(&want.data) {
                assert!((a - e).abs() < 1e-12, "k={k} d={d}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), dy> must equal <x, dx> and <w, dw> for a bias-free conv.
        let s = ConvShape {
            cin: 2,
            cout: 3,
            kernel: 5,
            dilation: 2,
        };
        let x = Tensor::from_vec(2, 2, 8, 6, pseudo(2 * 2 * 48, 4));
        let w = pseudo(s.weight_len(), 5);
        let dy = Tensor::from_vec(2, 3, 8, 6, pseudo(2 * 3 * 48, 6));
        let y = conv_forward(&x, &s, &w, None);
        let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let mut dw = vec![0.0; w.len()];
        let dx = conv_backward(&x, &s, &w, &dy, &mut dw, None, true).unwrap();
        let via_x: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn bn_train_output_is_standardized() {
        let x = Tensor::from_vec(3, 2, 4, 4, pseudo(96, 9));
        let (y, _, _, _) = bn_forward_train(&x, &[1.0, 1.0], &[0.0, 0.0], 0.0);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| y.plane(n, ch).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / 48.0;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 48.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn elu_values() {
        let mut v = vec![-1.0f64, 0.0, 2.0];
        elu_inplace(&mut v);
        assert!((v[0] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 2.0);
    }
}
