//! Building blocks with explicit forward caches and backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{push, push_mut, ParamMut, ParamRef, ParamSet};
use crate::ops;
use crate::scalar::Scalar;

pub(crate) fn normal_vec<T: Scalar, R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| T::of(dist.sample(rng))).collect()
}

fn empty_if<T: Scalar>(frozen: bool, len: usize) -> Vec<T> {
    if frozen {
        Vec::new()
    } else {
        vec![T::zero(); len]
    }
}

/// Affine map `y = x·W + b (+ shift)` applied to each row of `x`.
///
/// `weight` is stored `inp × out`. When `frozen`, only `shift` receives
/// gradients.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub inp: usize,
    pub out: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub shift: Option<Vec<T>>,
    pub frozen: bool,
}

impl<T: Scalar> Linear<T> {
    /// Trainable layer with Lecun-normal weights and zero bias.
    pub fn trainable<R: Rng>(rng: &mut R, inp: usize, out: usize) -> Self {
        Self {
            inp,
            out,
            weight: normal_vec(rng, inp * out, 1.0 / (inp as f64).sqrt()),
            bias: vec![T::zero(); out],
            shift: None,
            frozen: false,
        }
    }

    /// Frozen layer standing in for pretrained weights. `shifted` attaches a
    /// zero-initialised trainable shift.
    pub fn frozen<R: Rng>(rng: &mut R, inp: usize, out: usize, shifted: bool) -> Self {
        Self {
            inp,
            out,
            weight: normal_vec(rng, inp * out, 1.0 / (inp as f64).sqrt()),
            bias: normal_vec(rng, out, 0.02),
            shift: shifted.then(|| vec![T::zero(); out]),
            frozen: true,
        }
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        self.forward_with(x, rows, true)
    }

    /// Forward pass; `use_shift = false` evaluates the layer as if it had no
    /// shift parameter at all.
    pub fn forward_with(&self, x: &[T], rows: usize, use_shift: bool) -> Vec<T> {
        let mut y = ops::matmul(x, &self.weight, rows, self.inp, self.out);
        ops::add_row(&mut y, &self.bias);
        if use_shift {
            if let Some(shift) = &self.shift {
                ops::add_row(&mut y, shift);
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dx` when asked.
    pub fn backward(
        &self,
        x: &[T],
        dy: &[T],
        rows: usize,
        grad: &mut Linear<T>,
        need_dx: bool,
    ) -> Option<Vec<T>> {
        if !grad.weight.is_empty() {
            ops::matmul_tn_acc(x, dy, rows, self.inp, self.out, &mut grad.weight);
        }
        if !grad.bias.is_empty() {
            ops::col_sum_acc(dy, &mut grad.bias);
        }
        if let Some(shift) = grad.shift.as_mut() {
            ops::col_sum_acc(dy, shift);
        }
        need_dx.then(|| ops::matmul_nt(dy, &self.weight, rows, self.out, self.inp))
    }
}

impl<T: Scalar> ParamSet<T> for Linear<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        let train = !self.frozen;
        push(
            out,
            prefix,
            "weight",
            vec![self.inp, self.out],
            &self.weight,
            train,
        );
        push(out, prefix, "bias", vec![self.out], &self.bias, train);
        if let Some(shift) = &self.shift {
            push(out, prefix, "shift", vec![self.out], shift, true);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        let train = !self.frozen;
        push_mut(out, prefix, "weight", &mut self.weight, train);
        push_mut(out, prefix, "bias", &mut self.bias, train);
        if let Some(shift) = self.shift.as_mut() {
            push_mut(out, prefix, "shift", shift, true);
        }
    }

    fn zero_grad(&self) -> Self {
        Self {
            inp: self.inp,
            out: self.out,
            weight: empty_if(self.frozen, self.weight.len()),
            bias: empty_if(self.frozen, self.bias.len()),
            shift: self.shift.as_ref().map(|s| vec![T::zero(); s.len()]),
            frozen: self.frozen,
        }
    }
}

pub const LN_EPS: f64 = 1e-6;

/// Row-wise layer normalisation with a learned scale and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: vec![T::one(); dim],
            beta: vec![T::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &[T]) -> (Vec<T>, LayerNormCache<T>) {
        let d = self.dim();
        let rows = x.len() / d;
        let eps = T::of(LN_EPS);
        let inv_d = T::one() / T::of(d as f64);
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                y[r * d + c] = h * self.gamma[c] + self.beta[c];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &[T], grad: &mut LayerNorm<T>) -> Vec<T> {
        let d = self.dim();
        let inv_d = T::one() / T::of(d as f64);
        let mut dx = vec![T::zero(); dy.len()];
        for (r, &rs) in cache.rstd.iter().enumerate() {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let g = &dy[r * d..(r + 1) * d];
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for c in 0..d {
                grad.gamma[c] += g[c] * xh[c];
                grad.beta[c] += g[c];
                let dxh = g[c] * self.gamma[c];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[c];
            }
            for c in 0..d {
                let dxh = g[c] * self.gamma[c];
                dx[r * d + c] = rs * (dxh - sum_dxh * inv_d - xh[c] * sum_dxh_xh * inv_d);
            }
        }
        dx
    }
}

impl<T: Scalar> ParamSet<T> for LayerNorm<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        push(out, prefix, "gamma", vec![self.dim()], &self.gamma, true);
        push(out, prefix, "beta", vec![self.dim()], &self.beta, true);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        push_mut(out, prefix, "gamma", &mut self.gamma, true);
        push_mut(out, prefix, "beta", &mut self.beta, true);
    }

    fn zero_grad(&self) -> Self {
        Self {
            gamma: vec![T::zero(); self.dim()],
            beta: vec![T::zero(); self.dim()],
        }
    }
}

/// Scaled dot-product attention over `heads` equal slices of `dim`.
///
/// `q` is `nq × dim`, `k` and `v` are `nk × dim`. Returns the attended
/// values and the softmax probabilities (`heads × nq × nk`).
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    nq: usize,
    nk: usize,
    dim: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = dim / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut probs = vec![T::zero(); heads * nq * nk];
    let mut out = vec![T::zero(); nq * dim];
    for h in 0..heads {
        let off = h * dh;
        let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        for i in 0..nq {
            let qi = &q[i * dim + off..i * dim + off + dh];
            for j in 0..nk {
                let kj = &k[j * dim + off..j * dim + off + dh];
                let mut s = T::zero();
                for c in 0..dh {
                    s += qi[c] * kj[c];
                }
                p[i * nk + j] = s * scale;
            }
        }
        ops::softmax_rows(p, nk);
        for i in 0..nq {
            let oi = &mut out[i * dim + off..i * dim + off + dh];
            for j in 0..nk {
                let w = p[i * nk + j];
                let vj = &v[j * dim + off..j * dim + off + dh];
                for c in 0..dh {
                    oi[c] += w * vj[c];
                }
            }
        }
    }
    (out, probs)
}

/// Backward of [`attention_forward`]: returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    nq: usize,
    nk: usize,
    dim: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = dim / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = vec![T::zero(); nq * dim];
    let mut dk = vec![T::zero(); nk * dim];
    let mut dv = vec![T::zero(); nk * dim];
    let mut ds = vec![T::zero(); nk];
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        for i in 0..nq {
            let doi = &dout[i * dim + off..i * dim + off + dh];
            let prow = &p[i * nk..(i + 1) * nk];
            let mut dot = T::zero();
            for j in 0..nk {
                let vj = &v[j * dim + off..j * dim + off + dh];
                let mut dp = T::zero();
                for c in 0..dh {
                    dp += doi[c] * vj[c];
                }
                ds[j] = dp;
                dot += dp * prow[j];
                let dvj = &mut dv[j * dim + off..j * dim + off + dh];
                for c in 0..dh {
                    dvj[c] += prow[j] * doi[c];
                }
            }
            let qi = &q[i * dim + off..i * dim + off + dh];
            for j in 0..nk {
                let g = prow[j] * (ds[j] - dot) * scale;
                if g == T::zero() {
                    continue;
                }
                let kj = &k[j * dim + off..j * dim + off + dh];
                let dqi = &mut dq[i * dim + off..i * dim + off + dh];
                for c in 0..dh {
                    dqi[c] += g * kj[c];
                }
                let dkj = &mut dk[j * dim + off..j * dim + off + dh];
                for c in 0..dh {
                    dkj[c] += g * qi[c];
                }
            }
        }
    }
    (dq, dk, dv)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Gelu => ops::gelu(x),
            Activation::Relu => x.max(T::zero()),
        }
    }

    pub fn grad<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Gelu => ops::gelu_grad(x),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Two-layer perceptron `fc2(act(fc1(x)))`.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub act: Activation,
}

pub struct MlpCache<T> {
    x: Vec<T>,
    pre: Vec<T>,
    hidden: Vec<T>,
    rows: usize,
}

impl<T: Scalar> Mlp<T> {
    pub fn forward(&self, x: &[T], rows: usize, use_shift: bool) -> (Vec<T>, MlpCache<T>) {
        let pre = self.fc1.forward_with(x, rows, use_shift);
        let hidden: Vec<T> = pre.iter().map(|&v| self.act.apply(v)).collect();
        let y = self.fc2.forward_with(&hidden, rows, use_shift);
        (
            y,
            MlpCache {
                x: x.to_vec(),
                pre,
                hidden,
                rows,
            },
        )
    }

    pub fn backward(&self, cache: &MlpCache<T>, dy: &[T], grad: &mut Mlp<T>) -> Vec<T> {
        let mut dh = self
            .fc2
            .backward(&cache.hidden, dy, cache.rows, &mut grad.fc2, true)
            .expect("dx requested");
        for (d, &p) in dh.iter_mut().zip(&cache.pre) {
            *d *= self.act.grad(p);
        }
        self.fc1
            .backward(&cache.x, &dh, cache.rows, &mut grad.fc1, true)
            .expect("dx requested")
    }
}

impl<T: Scalar> ParamSet<T> for Mlp<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.fc1.collect(&super::params::join(prefix, "fc1"), out);
        self.fc2.collect(&super::params::join(prefix, "fc2"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.fc1
            .collect_mut(&super::params::join(prefix, "fc1"), out);
        self.fc2
            .collect_mut(&super::params::join(prefix, "fc2"), out);
    }

    fn zero_grad(&self) -> Self {
        Self {
            fc1: self.fc1.zero_grad(),
            fc2: self.fc2.zero_grad(),
            act: self.act,
        }
    }
}
