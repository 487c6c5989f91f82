//! Transformer building blocks with explicit forward caches and exact
//! backward passes. Backward methods accumulate parameter gradients into a
//! same-shaped gradient struct (`+=`), so several samples can share one.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{matmul, matmul_nt, matmul_tn, Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Truncated normal, resampling anything beyond two standard deviations.
pub(crate) fn trunc_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = normal.sample(rng);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// `y = x W + b` with `W` stored `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear { weight: Tensor::zeros(&[input, output]), bias: Tensor::zeros(&[output]) }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Linear { weight: trunc_normal(&[input, output], 0.02, rng), bias: Tensor::zeros(&[output]) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = matmul(x, &self.weight);
        let n = self.bias.len();
        for row in y.data_mut().chunks_exact_mut(n) {
            for (o, &b) in row.iter_mut().zip(self.bias.data()) {
                *o += b;
            }
        }
        y
    }

    /// Accumulates `dW`, `db` into `grad` and returns `dx`.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Linear<T>) -> Tensor<T> {
        grad.weight.add_assign(&matmul_tn(x, dy));
        let n = self.bias.len();
        for row in dy.data().chunks_exact(n) {
            for (g, &d) in grad.bias.data_mut().iter_mut().zip(row) {
                *g += d;
            }
        }
        matmul_nt(dy, &self.weight)
    }
}

/// Row-wise layer normalization with affine `gamma`, `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        let mut gamma = Tensor::zeros(&[dim]);
        gamma.fill(T::one());
        LayerNorm { gamma, beta: Tensor::zeros(&[dim]) }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerNorm { gamma: Tensor::zeros(&[dim]), beta: Tensor::zeros(&[dim]) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, LayerNormCache<T>) {
        let d = x.cols();
        let dn = T::of(d as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for row in xhat.data_mut().chunks_exact_mut(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let mut y = xhat.clone();
        for row in y.data_mut().chunks_exact_mut(d) {
            for ((v, &g), &b) in row.iter_mut().zip(self.gamma.data()).zip(self.beta.data()) {
                *v = *v * g + b;
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &Tensor<T>, grad: &mut LayerNorm<T>) -> Tensor<T> {
        let d = dy.cols();
        let dn = T::of(d as f64);
        let mut dx = Tensor::zeros(dy.shape());
        let rows = dy.data().chunks_exact(d).zip(cache.xhat.data().chunks_exact(d));
        for (i, (dyr, xr)) in rows.enumerate() {
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_x = T::zero();
            for j in 0..d {
                grad.gamma.data_mut()[j] += dyr[j] * xr[j];
                grad.beta.data_mut()[j] += dyr[j];
                let dxhat = dyr[j] * self.gamma.data()[j];
                sum_dxhat += dxhat;
                sum_dxhat_x += dxhat * xr[j];
            }
            let (mean_d, mean_dx) = (sum_dxhat / dn, sum_dxhat_x / dn);
            let inv = cache.inv_std[i];
            for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
                let dxhat = dyr[j] * self.gamma.data()[j];
                *out = inv * (dxhat - mean_d - xr[j] * mean_dx);
            }
        }
        dx
    }
}

/// GELU, tanh approximation.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

/// Inverted-dropout multipliers: `0` with probability `rate`, otherwise
/// `1 / (1 - rate)`. Returns `None` when dropout is inactive.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(len: usize, rate: f64, mode: Mode, rng: &mut R) -> Option<Vec<T>> {
    if mode == Mode::Eval || rate <= 0.0 {
        return None;
    }
    let keep = T::of(1.0 / (1.0 - rate));
    Some((0..len).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect())
}

pub(crate) fn apply_mask<T: Real>(x: &mut Tensor<T>, mask: Option<&Vec<T>>) {
    if let Some(mask) = mask {
        for (v, &m) in x.data_mut().iter_mut().zip(mask) {
            *v *= m;
        }
    }
}

/// Multi-head scaled dot-product self-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Softmax weights per head, each `(T, T)`.
    pub probs: Vec<Tensor<T>>,
    concat: Tensor<T>,
}

impl<T: Real> Attention<T> {
    pub fn zeros(dim: usize) -> Self {
        Attention { q: Linear::zeros(dim, dim), k: Linear::zeros(dim, dim), v: Linear::zeros(dim, dim), o: Linear::zeros(dim, dim) }
    }

    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Attention {
            q: Linear::init(dim, dim, rng),
            k: Linear::init(dim, dim, rng),
            v: Linear::init(dim, dim, rng),
            o: Linear::init(dim, dim, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, heads: usize) -> (Tensor<T>, AttentionCache<T>) {
        let (t, d) = (x.rows(), x.cols());
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let q = self.q.forward(x);
        let k = self.k.forward(x);
        let v = self.v.forward(x);
        let mut concat = Tensor::zeros(&[t, d]);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = Tensor::zeros(&[t, t]);
            for i in 0..t {
                let qi = &q.row(i)[cols.clone()];
                let row = p.row_mut(i);
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k.row(j)[cols.clone()];
                    *s = qi.iter().zip(kj).fold(T::zero(), |acc, (&a, &b)| acc + a * b) * scale;
                }
                let max = row.iter().fold(T::neg_infinity(), |m, &s| m.max(s));
                let mut total = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                for s in row.iter_mut() {
                    *s /= total;
                }
            }
            for i in 0..t {
                for j in 0..t {
                    let a = p.row(i)[j];
                    let vj = &v.row(j)[cols.clone()];
                    let out = &mut concat.row_mut(i)[cols.clone()];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += a * vv;
                    }
                }
            }
            probs.push(p);
        }
        let y = self.o.forward(&concat);
        (y, AttentionCache { x: x.clone(), q, k, v, probs, concat })
    }

    pub fn backward(&self, cache: &AttentionCache<T>, dy: &Tensor<T>, heads: usize, grad: &mut Attention<T>) -> Tensor<T> {
        let (t, d) = (cache.x.rows(), cache.x.cols());
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let dconcat = self.o.backward(&cache.concat, dy, &mut grad.o);
        let mut dq = Tensor::zeros(&[t, d]);
        let mut dk = Tensor::zeros(&[t, d]);
        let mut dv = Tensor::zeros(&[t, d]);
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = h * dh..(h + 1) * dh;
            // dA[i][j] = dO_i . V_j ; dV_j += sum_i A[i][j] dO_i
            let mut ds = Tensor::zeros(&[t, t]);
            for i in 0..t {
                let doi = &dconcat.row(i)[cols.clone()];
                for j in 0..t {
                    let vj = &cache.v.row(j)[cols.clone()];
                    ds.row_mut(i)[j] = doi.iter().zip(vj).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    let a = p.row(i)[j];
                    for (g, &o) in dv.row_mut(j)[cols.clone()].iter_mut().zip(doi) {
                        *g += a * o;
                    }
                }
                // softmax backward, folded with the score scale
                let pr = p.row(i);
                let dot = pr.iter().zip(ds.row(i)).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                for (s, &a) in ds.row_mut(i).iter_mut().zip(pr) {
                    *s = a * (*s - dot) * scale;
                }
            }
            for i in 0..t {
                for j in 0..t {
                    let s = ds.row(i)[j];
                    if s == T::zero() {
                        continue;
                    }
                    let kj = &cache.k.row(j)[cols.clone()];
                    for (g, &kv) in dq.row_mut(i)[cols.clone()].iter_mut().zip(kj) {
                        *g += s * kv;
                    }
                    let qi = &cache.q.row(i)[cols.clone()];
                    for (g, &qv) in dk.row_mut(j)[cols.clone()].iter_mut().zip(qi) {
                        *g += s * qv;
                    }
                }
            }
        }
        let mut dx = self.q.backward(&cache.x, &dq, &mut grad.q);
        dx.add_assign(&self.k.backward(&cache.x, &dk, &mut grad.k));
        dx.add_assign(&self.v.backward(&cache.x, &dv, &mut grad.v));
        dx
    }
}

/// Position-wise feed-forward block `fc2(gelu(fc1(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    x: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
}

impl<T: Real> Mlp<T> {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Mlp { fc1: Linear::zeros(dim, hidden), fc2: Linear::zeros(hidden, dim) }
    }

    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Mlp { fc1: Linear::init(dim, hidden, rng), fc2: Linear::init(hidden, dim, rng) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, MlpCache<T>) {
        let pre = self.fc1.forward(x);
        let mut act = pre.clone();
        act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let y = self.fc2.forward(&act);
        (y, MlpCache { x: x.clone(), pre, act })
    }

    pub fn backward(&self, cache: &MlpCache<T>, dy: &Tensor<T>, grad: &mut Mlp<T>) -> Tensor<T> {
        let mut dpre = self.fc2.backward(&cache.act, dy, &mut grad.fc2);
        for (g, &p) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
            *g *= gelu_grad(p);
        }
        self.fc1.backward(&cache.x, &dpre, &mut grad.fc1)
    }
}

/// Pre-norm encoder block:
/// `x1 = x + drop(attn(ln1(x)))`, `y = x1 + drop(mlp(ln2(x1)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock<T> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

#[derive(Debug, Clone)]
pub struct EncoderBlockCache<T> {
    ln1: LayerNormCache<T>,
    pub attn: AttentionCache<T>,
    attn_mask: Option<Vec<T>>,
    ln2: LayerNormCache<T>,
    mlp: MlpCache<T>,
    mlp_mask: Option<Vec<T>>,
}

impl<T: Real> EncoderBlock<T> {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        EncoderBlock { ln1: LayerNorm::zeros(dim), attn: Attention::zeros(dim), ln2: LayerNorm::zeros(dim), mlp: Mlp::zeros(dim, hidden) }
    }

    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        EncoderBlock { ln1: LayerNorm::new(dim), attn: Attention::init(dim, rng), ln2: LayerNorm::new(dim), mlp: Mlp::init(dim, hidden, rng) }
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Tensor<T>,
        heads: usize,
        dropout_rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> (Tensor<T>, EncoderBlockCache<T>) {
        let (a, ln1) = self.ln1.forward(x);
        let (mut m, attn) = self.attn.forward(&a, heads);
        let attn_mask = dropout_mask(m.len(), dropout_rate, mode, rng);
        apply_mask(&mut m, attn_mask.as_ref());
        let mut x1 = x.clone();
        x1.add_assign(&m);
        let (c, ln2) = self.ln2.forward(&x1);
        let (mut f, mlp) = self.mlp.forward(&c);
        let mlp_mask = dropout_mask(f.len(), dropout_rate, mode, rng);
        apply_mask(&mut f, mlp_mask.as_ref());
        x1.add_assign(&f);
        (x1, EncoderBlockCache { ln1, attn, attn_mask, ln2, mlp, mlp_mask })
    }

    pub fn backward(&self, cache: &EncoderBlockCache<T>, dy: &Tensor<T>, heads: usize, grad: &mut EncoderBlock<T>) -> Tensor<T> {
        let mut df = dy.clone();
        apply_mask(&mut df, cache.mlp_mask.as_ref());
        let dc = self.mlp.backward(&cache.mlp, &df, &mut grad.mlp);
        let mut dx1 = dy.clone();
        dx1.add_assign(&self.ln2.backward(&cache.ln2, &dc, &mut grad.ln2));
        let mut dm = dx1.clone();
        apply_mask(&mut dm, cache.attn_mask.as_ref());
        let da = self.attn.backward(&cache.attn, &dm, heads, &mut grad.attn);
        dx1.add_assign(&self.ln1.backward(&cache.ln1, &da, &mut grad.ln1));
        dx1
    }
}
