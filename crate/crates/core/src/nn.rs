//! Transformer building blocks with hand-written backward passes.
//!
//! Layers hold parameter names only; values and gradients live in
//! [`ParamStore`]s so the optimizer, checkpoints and gradient checks can
//! treat every parameter uniformly. Each `forward` returns whatever its
//! `backward` needs.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use statrs::function::erf::erf;

use crate::params::ParamStore;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: String,
}

impl Linear {
    pub fn new(prefix: &str) -> Self {
        Self {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn init<R: Rng>(&self, p: &mut ParamStore, fan_in: usize, fan_out: usize, rng: &mut R) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        p.uniform(&self.w, &[fan_in, fan_out], bound, rng);
        p.zeros(&self.b, &[fan_out]);
    }

    pub fn forward(&self, p: &ParamStore, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&p.matrix(&self.w));
        y += &p.vector(&self.b);
        y
    }

    /// Accumulates weight gradients into `g` and returns the input gradient.
    pub fn backward(
        &self,
        p: &ParamStore,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        g: &mut ParamStore,
    ) -> Array2<f64> {
        g.matrix_mut(&self.w).scaled_add(1.0, &x.t().dot(&dy));
        g.vector_mut(&self.b).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        dy.dot(&p.matrix(&self.w).t())
    }

    /// Weight gradient only, for frozen inputs.
    pub fn backward_params(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, g: &mut ParamStore) {
        g.matrix_mut(&self.w).scaled_add(1.0, &x.t().dot(&dy));
        g.vector_mut(&self.b).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(prefix: &str) -> Self {
        Self {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
        }
    }

    pub fn init(&self, p: &mut ParamStore, dim: usize) {
        p.ones(&self.gamma, &[dim]);
        p.zeros(&self.beta, &[dim]);
    }

    pub fn forward(&self, p: &ParamStore, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *r = 1.0 / (var + LN_EPS).sqrt();
            row *= *r;
        }
        let mut y = &xhat * &p.vector(&self.gamma);
        y += &p.vector(&self.beta);
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &LayerNormCache,
        dy: ArrayView2<f64>,
        g: &mut ParamStore,
    ) -> Array2<f64> {
        g.vector_mut(&self.gamma)
            .scaled_add(1.0, &(&dy * &cache.xhat).sum_axis(Axis(0)));
        g.vector_mut(&self.beta).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        let dxhat = &dy * &p.vector(&self.gamma);
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, dh), xh), r) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.xhat.rows())
            .zip(cache.rstd.iter())
        {
            let mean_dh = dh.sum() / d;
            let mean_dhx = dh.dot(&xh) / d;
            Zip::from(&mut out)
                .and(&dh)
                .and(&xh)
                .for_each(|o, &a, &b| *o = r * (a - mean_dh - b * mean_dhx));
        }
        dx
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

pub struct AttentionCache {
    x: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    merged: Array2<f64>,
}

impl Attention {
    pub fn new(prefix: &str, heads: usize) -> Self {
        Self {
            qkv: Linear::new(&format!("{prefix}.qkv")),
            proj: Linear::new(&format!("{prefix}.proj")),
            heads,
        }
    }

    pub fn init<R: Rng>(&self, p: &mut ParamStore, dim: usize, rng: &mut R) {
        self.qkv.init(p, dim, 3 * dim, rng);
        self.proj.init(p, dim, dim, rng);
    }

    pub fn forward(&self, p: &ParamStore, x: ArrayView2<f64>) -> (Array2<f64>, AttentionCache) {
        let n = x.nrows();
        let d = x.ncols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = self.qkv.forward(p, x);
        let mut merged = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut a = q.dot(&k.t());
            a *= scale;
            softmax_rows(&mut a);
            merged.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&a.dot(&v));
            probs.push(a);
        }
        let out = self.proj.forward(p, merged.view());
        (
            out,
            AttentionCache {
                x: x.to_owned(),
                qkv,
                probs,
                merged,
            },
        )
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &AttentionCache,
        dy: ArrayView2<f64>,
        g: &mut ParamStore,
    ) -> Array2<f64> {
        let n = cache.x.nrows();
        let d = cache.x.ncols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dmerged = self.proj.backward(p, cache.merged.view(), dy, g);
        let mut dqkv = Array2::zeros((n, 3 * d));
        for h in 0..self.heads {
            let q = cache.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = cache.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = cache.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let a = &cache.probs[h];
            let dout = dmerged.slice(s![.., h * dh..(h + 1) * dh]);
            let da = dout.dot(&v.t());
            let dv = a.t().dot(&dout);
            // softmax backward: ds = a * (da - rowsum(da * a))
            let mut ds = &da * a;
            let row_dot = ds.sum_axis(Axis(1));
            ds -= &(a * &row_dot.insert_axis(Axis(1)));
            ds *= scale;
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
            dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&dk);
            dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
        }
        self.qkv.backward(p, cache.x.view(), dqkv.view(), g)
    }
}

pub fn softmax_rows(a: &mut Array2<f64>) {
    for mut row in a.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    h2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

impl Block {
    pub fn new(prefix: &str, heads: usize) -> Self {
        Self {
            ln1: LayerNorm::new(&format!("{prefix}.ln1")),
            attn: Attention::new(&format!("{prefix}.attn"), heads),
            ln2: LayerNorm::new(&format!("{prefix}.ln2")),
            fc1: Linear::new(&format!("{prefix}.mlp.fc1")),
            fc2: Linear::new(&format!("{prefix}.mlp.fc2")),
        }
    }

    pub fn init<R: Rng>(&self, p: &mut ParamStore, dim: usize, hidden: usize, rng: &mut R) {
        self.ln1.init(p, dim);
        self.attn.init(p, dim, rng);
        self.ln2.init(p, dim);
        self.fc1.init(p, dim, hidden, rng);
        self.fc2.init(p, hidden, dim, rng);
    }

    pub fn forward(&self, p: &ParamStore, x: ArrayView2<f64>) -> (Array2<f64>, BlockCache) {
        let (h1, ln1) = self.ln1.forward(p, x);
        let (a, attn) = self.attn.forward(p, h1.view());
        let x1 = &x + &a;
        let (h2, ln2) = self.ln2.forward(p, x1.view());
        let pre_act = self.fc1.forward(p, h2.view());
        let act = pre_act.mapv(gelu);
        let out = &x1 + &self.fc2.forward(p, act.view());
        (
            out,
            BlockCache {
                ln1,
                attn,
                ln2,
                h2,
                pre_act,
                act,
            },
        )
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &BlockCache,
        dy: ArrayView2<f64>,
        g: &mut ParamStore,
    ) -> Array2<f64> {
        let dact = self.fc2.backward(p, cache.act.view(), dy, g);
        let dpre = &dact * &cache.pre_act.mapv(gelu_grad);
        let dh2 = self.fc1.backward(p, cache.h2.view(), dpre.view(), g);
        let mut dx1 = self.ln2.backward(p, &cache.ln2, dh2.view(), g);
        dx1 += &dy;
        let dh1 = self.attn.backward(p, &cache.attn, dx1.view(), g);
        let mut dx = self.ln1.backward(p, &cache.ln1, dh1.view(), g);
        dx += &dx1;
        dx
    }
}

/// Stack of blocks followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

pub struct TransformerCache {
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
}

impl Transformer {
    pub fn new(prefix: &str, depth: usize, heads: usize) -> Self {
        Self {
            blocks: (0..depth)
                .map(|i| Block::new(&format!("{prefix}.blocks.{i}"), heads))
                .collect(),
            norm: LayerNorm::new(&format!("{prefix}.norm")),
        }
    }

    pub fn init<R: Rng>(&self, p: &mut ParamStore, dim: usize, hidden: usize, rng: &mut R) {
        for b in &self.blocks {
            b.init(p, dim, hidden, rng);
        }
        self.norm.init(p, dim);
    }

    pub fn forward(&self, p: &ParamStore, x: ArrayView2<f64>) -> (Array2<f64>, TransformerCache) {
        let mut h = x.to_owned();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, c) = b.forward(p, h.view());
            caches.push(c);
            h = next;
        }
        let (out, norm) = self.norm.forward(p, h.view());
        (
            out,
            TransformerCache {
                blocks: caches,
                norm,
            },
        )
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &TransformerCache,
        dy: ArrayView2<f64>,
        g: &mut ParamStore,
    ) -> Array2<f64> {
        let mut dh = self.norm.backward(p, &cache.norm, dy, g);
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            dh = b.backward(p, c, dh.view(), g);
        }
        dh
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    /// Checks d<w, f(x)>/dx against central differences for a scalar projection.
    fn check_input_grad<F>(x: &Array2<f64>, w: &Array2<f64>, f: F, analytic: &Array2<f64>)
    where
        F: Fn(&Array2<f64>) -> Array2<f64>,
    {
        let eps = 1e-6;
        for idx in [(0, 0), (1, 2), (x.nrows() - 1, x.ncols() - 1)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let num = ((&f(&xp) * w).sum() - (&f(&xm) * w).sum()) / (2.0 * eps);
            assert!(
                (num - analytic[idx]).abs() < 1e-6 * (1.0 + num.abs()),
                "{idx:?}: {num} vs {}",
                analytic[idx]
            );
        }
    }

    #[test]
    fn gelu_derivative() {
        for x in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_input_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamStore::new();
        let ln = LayerNorm::new("ln");
        ln.init(&mut p, 6);
        p.get_mut("ln.gamma").unwrap().mapv_inplace(|_| rng.random_range(0.5..1.5));
        let x = random((4, 6), &mut rng);
        let w = random((4, 6), &mut rng);
        let (_, cache) = ln.forward(&p, x.view());
        let mut g = p.zeros_like();
        let dx = ln.backward(&p, &cache, w.view(), &mut g);
        check_input_grad(&x, &w, |x| ln.forward(&p, x.view()).0, &dx);
    }

    #[test]
    fn attention_input_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamStore::new();
        let attn = Attention::new("attn", 2);
        attn.init(&mut p, 8, &mut rng);
        let x = random((5, 8), &mut rng);
        let w = random((5, 8), &mut rng);
        let (_, cache) = attn.forward(&p, x.view());
        let mut g = p.zeros_like();
        let dx = attn.backward(&p, &cache, w.view(), &mut g);
        check_input_grad(&x, &w, |x| attn.forward(&p, x.view()).0, &dx);
    }

    #[test]
    fn block_input_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamStore::new();
        let block = Block::new("b", 2);
        block.init(&mut p, 8, 16, &mut rng);
        let x = random((5, 8), &mut rng);
        let w = random((5, 8), &mut rng);
        let (_, cache) = block.forward(&p, x.view());
        let mut g = p.zeros_like();
        let dx = block.backward(&p, &cache, w.view(), &mut g);
        check_input_grad(&x, &w, |x| block.forward(&p, x.view()).0, &dx);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut a = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 1000.0, 1000.0, 1000.0]).unwrap();
        softmax_rows(&mut a);
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((a[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }
}
