//! Layers with explicit forward caches and hand-derived backward passes.
//!
//! Forward takes `&self` (frozen weights are safe to share across threads);
//! backward takes `&mut self` and accumulates into each parameter's
//! gradient buffer. Sequences are processed one at a time, so attention
//! masks are per-position validity flags.

use rand_chacha::ChaCha8Rng;

use super::{softmax_backward, softmax_masked, Mat, Param, Params};

/// Token embedding table.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: Param,
}

impl Embedding {
    pub fn new(vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            table: Param::normal(vocab, dim, 0.02, rng),
        }
    }

    pub fn forward(&self, ids: &[usize]) -> Mat {
        let dim = self.table.w.cols;
        let mut out = Mat::zeros(ids.len(), dim);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.table.w.row(id));
        }
        out
    }

    pub fn backward(&mut self, ids: &[usize], dout: &Mat) {
        for (i, &id) in ids.iter().enumerate() {
            let grow = self.table.g.row_mut(id);
            for (g, &d) in grow.iter_mut().zip(dout.row(i)) {
                *g += d;
            }
        }
    }
}

impl Params for Embedding {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&format!("{prefix}.table"), &self.table);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}.table"), &mut self.table);
    }
}

/// Affine map y = xW + b.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: Param::glorot(input, output, rng),
            b: Param::zeros(1, output),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, Mat) {
        let mut y = Mat::matmul(x, &self.w.w);
        for r in 0..y.rows {
            for (v, &b) in y.row_mut(r).iter_mut().zip(self.b.w.row(0)) {
                *v += b;
            }
        }
        (y, x.clone())
    }

    pub fn backward(&mut self, cache: &Mat, dy: &Mat) -> Mat {
        Mat::add_at_b(&mut self.w.g, cache, dy);
        for r in 0..dy.rows {
            for (g, &d) in self.b.g.row_mut(0).iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        // dX = dY * W^T
        Mat::matmul_bt(dy, &self.w.w)
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

/// Per-position layer normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        let mut gamma = Param::zeros(1, dim);
        gamma.w.fill(1.0);
        Self {
            gamma,
            beta: Param::zeros(1, dim),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LayerNormCache) {
        let d = x.cols as f64;
        let mut y = Mat::zeros(x.rows, x.cols);
        let mut xhat = Mat::zeros(x.rows, x.cols);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std.push(istd);
            for c in 0..x.cols {
                let xh = (row[c] - mean) * istd;
                *xhat.at_mut(r, c) = xh;
                *y.at_mut(r, c) = self.gamma.w.at(0, c) * xh + self.beta.w.at(0, c);
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Mat) -> Mat {
        let d = dy.cols as f64;
        let mut dx = Mat::zeros(dy.rows, dy.cols);
        for r in 0..dy.rows {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            for c in 0..dy.cols {
                *self.gamma.g.at_mut(0, c) += dyr[c] * xh[c];
                *self.beta.g.at_mut(0, c) += dyr[c];
            }
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            let dxh: Vec<f64> = (0..dy.cols)
                .map(|c| {
                    let v = dyr[c] * self.gamma.w.at(0, c);
                    sum_dxh += v;
                    sum_dxh_xh += v * xh[c];
                    v
                })
                .collect();
            let istd = cache.inv_std[r];
            for c in 0..dy.cols {
                *dx.at_mut(r, c) = istd * (dxh[c] - sum_dxh / d - xh[c] * sum_dxh_xh / d);
            }
        }
        dx
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

/// Inverted dropout; returns the scaled keep-mask so backward can reuse it.
pub fn dropout_forward(
    x: &mut Mat,
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Option<Mat> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    use rand::Rng;
    let keep = 1.0 - p;
    let mut mask = Mat::zeros(x.rows, x.cols);
    for (m, v) in mask.data.iter_mut().zip(&mut x.data) {
        if rng.gen::<f64>() < keep {
            *m = 1.0 / keep;
            *v *= *m;
        } else {
            *v = 0.0;
        }
    }
    Some(mask)
}

pub fn dropout_backward(dy: &mut Mat, mask: &Option<Mat>) {
    if let Some(mask) = mask {
        for (d, &m) in dy.data.iter_mut().zip(&mask.data) {
            *d *= m;
        }
    }
}

/// Multi-head self-attention over one sequence with key-side padding masks.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct SelfAttentionCache {
    qc: Mat,
    kc: Mat,
    vc: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    alpha: Vec<Mat>,
    oc: Mat,
}

impl SelfAttention {
    pub fn new(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(dim % heads == 0, "d_model must divide num_heads");
        Self {
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::new(dim, dim, rng),
            heads,
        }
    }

    pub fn forward(&self, x: &Mat, valid: &[bool]) -> (Mat, SelfAttentionCache) {
        let n = x.rows;
        let dh = x.cols / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (q, qc) = self.wq.forward(x);
        let (k, kc) = self.wk.forward(x);
        let (v, vc) = self.wv.forward(x);

        let mut concat = Mat::zeros(n, x.cols);
        let mut alpha = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off = h * dh;
            let mut scores = Mat::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0;
                    for c in 0..dh {
                        acc += q.at(i, off + c) * k.at(j, off + c);
                    }
                    *scores.at_mut(i, j) = acc * scale;
                }
            }
            for i in 0..n {
                softmax_masked(scores.row_mut(i), |j| valid[j]);
            }
            for i in 0..n {
                for j in 0..n {
                    let a = scores.at(i, j);
                    if a == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        *concat.at_mut(i, off + c) += a * v.at(j, off + c);
                    }
                }
            }
            alpha.push(scores);
        }
        let (out, oc) = self.wo.forward(&concat);
        (
            out,
            SelfAttentionCache {
                qc,
                kc,
                vc,
                q,
                k,
                v,
                alpha,
                oc,
            },
        )
    }

    pub fn backward(&mut self, cache: &SelfAttentionCache, dout: &Mat) -> Mat {
        let n = dout.rows;
        let d = dout.cols;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dconcat = self.wo.backward(&cache.oc, dout);

        let mut dq = Mat::zeros(n, d);
        let mut dk = Mat::zeros(n, d);
        let mut dv = Mat::zeros(n, d);
        for h in 0..self.heads {
            let off = h * dh;
            let alpha = &cache.alpha[h];
            // dalpha = dconcat_h * v_h^T ; dv = alpha^T * dconcat_h
            let mut dalpha = Mat::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0;
                    for c in 0..dh {
                        acc += dconcat.at(i, off + c) * cache.v.at(j, off + c);
                    }
                    *dalpha.at_mut(i, j) = acc;
                    let a = alpha.at(i, j);
                    if a != 0.0 {
                        for c in 0..dh {
                            *dv.at_mut(j, off + c) += a * dconcat.at(i, off + c);
                        }
                    }
                }
            }
            for i in 0..n {
                softmax_backward(alpha.row(i), dalpha.row_mut(i));
            }
            for i in 0..n {
                for j in 0..n {
                    let ds = dalpha.at(i, j) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        *dq.at_mut(i, off + c) += ds * cache.k.at(j, off + c);
                        *dk.at_mut(j, off + c) += ds * cache.q.at(i, off + c);
                    }
                }
            }
        }
        let mut dx = self.wq.backward(&cache.qc, &dq);
        dx.add_assign(&self.wk.backward(&cache.kc, &dk));
        dx.add_assign(&self.wv.backward(&cache.vc, &dv));
        dx
    }
}

impl Params for SelfAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
    }
}

/// Position-wise feed-forward: Linear -> ReLU -> Linear.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache {
    c1: Mat,
    relu_in: Mat,
    c2: Mat,
}

impl FeedForward {
    pub fn new(dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            lin1: Linear::new(dim, hidden, rng),
            lin2: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, FeedForwardCache) {
        let (mut h, c1) = self.lin1.forward(x);
        let relu_in = h.clone();
        for v in &mut h.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let (y, c2) = self.lin2.forward(&h);
        (y, FeedForwardCache { c1, relu_in, c2 })
    }

    pub fn backward(&mut self, cache: &FeedForwardCache, dy: &Mat) -> Mat {
        let mut dh = self.lin2.backward(&cache.c2, dy);
        for (d, &x) in dh.data.iter_mut().zip(&cache.relu_in.data) {
            if x < 0.0 {
                *d = 0.0;
            }
        }
        self.lin1.backward(&cache.c1, &dh)
    }
}

impl Params for FeedForward {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.lin1.visit(&format!("{prefix}.lin1"), f);
        self.lin2.visit(&format!("{prefix}.lin2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.lin1.visit_mut(&format!("{prefix}.lin1"), f);
        self.lin2.visit_mut(&format!("{prefix}.lin2"), f);
    }
}

/// Post-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attn: SelfAttention,
    pub norm1: LayerNorm,
    pub ff: FeedForward,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct EncoderBlockCache {
    attn: SelfAttentionCache,
    drop1: Option<Mat>,
    ln1: LayerNormCache,
    ff: FeedForwardCache,
    drop2: Option<Mat>,
    ln2: LayerNormCache,
}

impl EncoderBlock {
    pub fn new(dim: usize, heads: usize, hidden: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            attn: SelfAttention::new(dim, heads, rng),
            norm1: LayerNorm::new(dim),
            ff: FeedForward::new(dim, hidden, rng),
            norm2: LayerNorm::new(dim),
            dropout,
        }
    }

    pub fn forward(
        &self,
        x: &Mat,
        valid: &[bool],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Mat, EncoderBlockCache) {
        let (mut a, attn) = self.attn.forward(x, valid);
        let drop1 = dropout_forward(&mut a, self.dropout, rng.as_deref_mut());
        a.add_assign(x);
        let (x1, ln1) = self.norm1.forward(&a);
        let (mut f, ff) = self.ff.forward(&x1);
        let drop2 = dropout_forward(&mut f, self.dropout, rng.as_deref_mut());
        f.add_assign(&x1);
        let (y, ln2) = self.norm2.forward(&f);
        (
            y,
            EncoderBlockCache {
                attn,
                drop1,
                ln1,
                ff,
                drop2,
                ln2,
            },
        )
    }

    pub fn backward(&mut self, cache: &EncoderBlockCache, dy: &Mat) -> Mat {
        let dres2 = self.norm2.backward(&cache.ln2, dy);
        let mut dff = dres2.clone();
        dropout_backward(&mut dff, &cache.drop2);
        let mut dx1 = self.ff.backward(&cache.ff, &dff);
        dx1.add_assign(&dres2);
        let dres1 = self.norm1.backward(&cache.ln1, &dx1);
        let mut dattn = dres1.clone();
        dropout_backward(&mut dattn, &cache.drop1);
        let mut dx = self.attn.backward(&cache.attn, &dattn);
        dx.add_assign(&dres1);
        dx
    }
}

impl Params for EncoderBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.norm1.visit(&format!("{prefix}.norm1"), f);
        self.ff.visit(&format!("{prefix}.ff"), f);
        self.norm2.visit(&format!("{prefix}.norm2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.norm1.visit_mut(&format!("{prefix}.norm1"), f);
        self.ff.visit_mut(&format!("{prefix}.ff"), f);
        self.norm2.visit_mut(&format!("{prefix}.norm2"), f);
    }
}

/// Fixed sinusoidal positional encodings for `n` positions.
pub fn sinusoidal_positions(n: usize, dim: usize) -> Mat {
    let mut pe = Mat::zeros(n, dim);
    for pos in 0..n {
        for i in 0..dim / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = pos as f64 * rate;
            *pe.at_mut(pos, 2 * i) = angle.sin();
            if 2 * i + 1 < dim {
                *pe.at_mut(pos, 2 * i + 1) = angle.cos();
            }
        }
    }
    pe
}
