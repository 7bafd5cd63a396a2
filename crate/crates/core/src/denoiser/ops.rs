//! Layer primitives with their backward passes.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};

use crate::scalar::{sigmoid, softplus, Real};

use super::mask::AttentionMask;
use super::params::{Attention, LayerNorm, Linear};

pub(crate) const LN_EPS: f64 = 1e-5;

impl<T: Real> Linear<T> {
    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn forward_vec(&self, x: ArrayView1<T>) -> Array1<T> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub(crate) fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Linear<T>) -> Array2<T> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    pub(crate) fn backward_vec(&self, x: ArrayView1<T>, dy: ArrayView1<T>, grad: &mut Linear<T>) -> Array1<T> {
        for (i, &xi) in x.iter().enumerate() {
            let mut row = grad.weight.row_mut(i);
            row.scaled_add(xi, &dy);
        }
        grad.bias += &dy;
        self.weight.dot(&dy)
    }
}

pub(crate) struct LnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        self.forward_cached(x).0
    }

    pub(crate) fn forward_cached(&self, x: &Array2<T>) -> (Array2<T>, LnCache<T>) {
        let (n, d) = x.dim();
        let dn = T::from_count(d);
        let eps = T::lit(LN_EPS);
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Array1::zeros(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.sum() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            for (o, &v) in xhat.row_mut(i).iter_mut().zip(row.iter()) {
                *o = (v - mean) * inv;
            }
        }
        let y = &xhat * &self.gain + &self.bias;
        (y, LnCache { xhat, inv_std })
    }

    pub(crate) fn backward(&self, cache: &LnCache<T>, dy: &Array2<T>, grad: &mut LayerNorm<T>) -> Array2<T> {
        grad.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let (n, d) = dy.dim();
        let dn = T::from_count(d);
        let mut dx = Array2::zeros((n, d));
        for i in 0..n {
            let xh = cache.xhat.row(i);
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for j in 0..d {
                let g = dy[[i, j]] * self.gain[j];
                sum_g += g;
                sum_gx += g * xh[j];
            }
            let (mg, mgx) = (sum_g / dn, sum_gx / dn);
            let inv = cache.inv_std[i];
            for j in 0..d {
                let g = dy[[i, j]] * self.gain[j];
                dx[[i, j]] = inv * (g - mg - xh[j] * mgx);
            }
        }
        dx
    }
}

pub(crate) struct AttnCache<T> {
    q_in: Array2<T>,
    kv_in: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// `heads x N x N`, zero where masked.
    probs: Array3<T>,
    ctx: Array2<T>,
}

impl<T: Real> Attention<T> {
    pub fn inner_width(&self) -> usize {
        self.query.weight.ncols()
    }

    /// Multi-head attention of `xq` over `xkv` restricted to the allowed
    /// entries of `mask`.
    pub fn forward(&self, xq: &Array2<T>, xkv: &Array2<T>, heads: usize, mask: &AttentionMask) -> Array2<T> {
        self.forward_cached(xq, xkv, heads, mask).0
    }

    pub(crate) fn forward_cached(
        &self,
        xq: &Array2<T>,
        xkv: &Array2<T>,
        heads: usize,
        mask: &AttentionMask,
    ) -> (Array2<T>, AttnCache<T>) {
        let n = xq.nrows();
        assert_eq!(xkv.nrows(), n, "query and key frame counts differ");
        assert_eq!(mask.len(), n, "mask size differs from frame count");
        let q = self.query.forward(xq);
        let k = self.key.forward(xkv);
        let v = self.value.forward(xkv);
        let width = q.ncols();
        let hd = width / heads;
        let scale = T::one() / T::from_count(hd).sqrt();
        let mut probs = Array3::zeros((heads, n, n));
        let mut ctx = Array2::zeros((n, width));
        let mut scores = vec![T::zero(); n];
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let qh = q.slice(s![.., cols.clone()]);
            let kh = k.slice(s![.., cols.clone()]);
            let vh = v.slice(s![.., cols.clone()]);
            for i in 0..n {
                let allowed = mask.allowed_keys(i);
                assert!(!allowed.is_empty(), "attention row {i} fully masked");
                let mut max = T::neg_infinity();
                for &j in allowed {
                    let sc = qh.row(i).dot(&kh.row(j)) * scale;
                    scores[j] = sc;
                    if sc > max {
                        max = sc;
                    }
                }
                let mut total = T::zero();
                for &j in allowed {
                    let e = (scores[j] - max).exp();
                    scores[j] = e;
                    total += e;
                }
                let mut out = ctx.slice_mut(s![i, cols.clone()]);
                for &j in allowed {
                    let p = scores[j] / total;
                    probs[[h, i, j]] = p;
                    out.scaled_add(p, &vh.row(j));
                }
            }
        }
        let y = self.out.forward(&ctx);
        (
            y,
            AttnCache {
                q_in: xq.clone(),
                kv_in: xkv.clone(),
                q,
                k,
                v,
                probs,
                ctx,
            },
        )
    }

    /// Returns `(dL/dxq, dL/dxkv)`.
    pub(crate) fn backward(
        &self,
        cache: &AttnCache<T>,
        dy: &Array2<T>,
        heads: usize,
        mask: &AttentionMask,
        grad: &mut Attention<T>,
    ) -> (Array2<T>, Array2<T>) {
        let dctx = self.out.backward(&cache.ctx, dy, &mut grad.out);
        let (n, width) = cache.q.dim();
        let hd = width / heads;
        let scale = T::one() / T::from_count(hd).sqrt();
        let mut dq = Array2::zeros((n, width));
        let mut dk = Array2::zeros((n, width));
        let mut dv = Array2::zeros((n, width));
        let mut dp = vec![T::zero(); n];
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..n {
                let allowed = mask.allowed_keys(i);
                let dout = dctx.slice(s![i, cols.clone()]);
                let mut dot_pd = T::zero();
                for &j in allowed {
                    let p = cache.probs[[h, i, j]];
                    let vj = cache.v.slice(s![j, cols.clone()]);
                    dp[j] = dout.dot(&vj);
                    dot_pd += p * dp[j];
                    dv.slice_mut(s![j, cols.clone()]).scaled_add(p, &dout);
                }
                for &j in allowed {
                    let p = cache.probs[[h, i, j]];
                    let ds = p * (dp[j] - dot_pd) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = cache.k.slice(s![j, cols.clone()]);
                    dq.slice_mut(s![i, cols.clone()]).scaled_add(ds, &kj);
                    let qi = cache.q.slice(s![i, cols.clone()]);
                    dk.slice_mut(s![j, cols.clone()]).scaled_add(ds, &qi);
                }
            }
        }
        let dxq = self.query.backward(&cache.q_in, &dq, &mut grad.query);
        let mut dxkv = self.key.backward(&cache.kv_in, &dk, &mut grad.key);
        dxkv += &self.value.backward(&cache.kv_in, &dv, &mut grad.value);
        (dxq, dxkv)
    }
}

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let half = T::lit(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * k * x * x)
}

pub(crate) fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

pub(crate) fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub(crate) fn mish<T: Real>(x: T) -> T {
    x * softplus(x).tanh()
}

pub(crate) fn mish_grad<T: Real>(x: T) -> T {
    let t = softplus(x).tanh();
    t + x * (T::one() - t * t) * sigmoid(x)
}

/// Sinusoidal encoding of a scalar position into `d` channels:
/// `PE(p, 2i) = sin(p / 10000^(2i/d))`, `PE(p, 2i+1) = cos(p / 10000^(2i/d))`.
pub fn sinusoidal<T: Real>(position: f64, d: usize) -> Array1<T> {
    let mut pe = Array1::zeros(d);
    for i in 0..d.div_ceil(2) {
        let freq = 10000f64.powf(-((2 * i) as f64) / d as f64);
        let a = position * freq;
        pe[2 * i] = T::lit(a.sin());
        if 2 * i + 1 < d {
            pe[2 * i + 1] = T::lit(a.cos());
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn activation_derivatives() {
        for &x in &[-4.0, -1.3, -0.2, 0.0, 0.7, 2.5, 9.0] {
            assert!((gelu_grad(x) - fd(gelu, x)).abs() < 1e-8);
            assert!((silu_grad(x) - fd(silu, x)).abs() < 1e-8);
            assert!((mish_grad(x) - fd(mish, x)).abs() < 1e-8);
        }
    }

    #[test]
    fn sinusoid_values() {
        let pe0 = sinusoidal::<f64>(0.0, 16);
        for i in 0..8 {
            assert_eq!(pe0[2 * i], 0.0);
            assert_eq!(pe0[2 * i + 1], 1.0);
        }
        let pe = sinusoidal::<f64>(37.0, 16);
        assert_eq!(pe[0], 37f64.sin());
        assert!(pe.iter().all(|v| v.abs() <= 1.0));
    }
}
