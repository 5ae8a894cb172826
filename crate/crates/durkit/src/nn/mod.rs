//! Minimal neural substrate: row-major f64 matrices, parameters with
//! accumulated gradients, seeded initialization, and Adam.
//!
//! Everything is f64 and single-threaded so training trajectories are
//! bit-reproducible and analytic gradients can be checked against central
//! finite differences directly.

pub mod layers;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    /// C = A * B.
    pub fn matmul(a: &Mat, b: &Mat) -> Mat {
        assert_eq!(a.cols, b.rows, "matmul shape mismatch");
        let mut c = Mat::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            let arow = a.row(i);
            let crow = c.row_mut(i);
            for (k, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = b.row(k);
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aik * bv;
                }
            }
        }
        c
    }

    /// C = A * B^T.
    pub fn matmul_bt(a: &Mat, b: &Mat) -> Mat {
        assert_eq!(a.cols, b.cols, "matmul_bt shape mismatch");
        let mut c = Mat::zeros(a.rows, b.rows);
        for i in 0..a.rows {
            let arow = a.row(i);
            for j in 0..b.rows {
                let brow = b.row(j);
                let mut acc = 0.0;
                for (&av, &bv) in arow.iter().zip(brow) {
                    acc += av * bv;
                }
                *c.at_mut(i, j) = acc;
            }
        }
        c
    }

    /// C += A^T * B, accumulating into an existing matrix.
    pub fn add_at_b(c: &mut Mat, a: &Mat, b: &Mat) {
        assert_eq!(a.rows, b.rows, "add_at_b shape mismatch");
        assert_eq!(c.rows, a.cols);
        assert_eq!(c.cols, b.cols);
        for k in 0..a.rows {
            let arow = a.row(k);
            let brow = b.row(k);
            for (i, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let crow = c.row_mut(i);
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

/// A weight tensor paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub w: Mat,
    pub g: Mat,
}

impl Param {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            w: Mat::zeros(rows, cols),
            g: Mat::zeros(rows, cols),
        }
    }

    /// Glorot-uniform initialization.
    pub fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let mut w = Mat::zeros(rows, cols);
        for v in &mut w.data {
            *v = rng.gen_range(-bound..bound);
        }
        Self {
            g: Mat::zeros(rows, cols),
            w,
        }
    }

    /// Small-normal initialization used for embedding tables.
    pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut w = Mat::zeros(rows, cols);
        for v in &mut w.data {
            *v = std * gaussian(rng);
        }
        Self {
            g: Mat::zeros(rows, cols),
            w,
        }
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(0.0);
    }

    pub fn count(&self) -> usize {
        self.w.data.len()
    }
}

/// Standard normal sample via Box-Muller.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Numerically stable softplus.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place masked softmax over a score row. Masked entries get weight 0;
/// a fully masked row becomes all zeros rather than NaN.
pub fn softmax_masked(scores: &mut [f64], valid: impl Fn(usize) -> bool) {
    let mut max = f64::NEG_INFINITY;
    for (j, &s) in scores.iter().enumerate() {
        if valid(j) && s > max {
            max = s;
        }
    }
    if max == f64::NEG_INFINITY {
        scores.iter_mut().for_each(|s| *s = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, s) in scores.iter_mut().enumerate() {
        if valid(j) {
            *s = (*s - max).exp();
            sum += *s;
        } else {
            *s = 0.0;
        }
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Gradient of softmax given its output `probs` and upstream `dprobs`,
/// written back into `dprobs`.
pub fn softmax_backward(probs: &[f64], dprobs: &mut [f64]) {
    let dot: f64 = probs.iter().zip(dprobs.iter()).map(|(&p, &d)| p * d).sum();
    for (d, &p) in dprobs.iter_mut().zip(probs) {
        *d = p * (*d - dot);
    }
}

/// Visitor over named parameters; names define the checkpoint layout.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.count());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    /// Clip gradients to a global L2 norm; returns the pre-clip norm.
    fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let mut sq = 0.0;
        self.visit("", &mut |_, p| {
            sq += p.g.data.iter().map(|g| g * g).sum::<f64>();
        });
        let norm = sq.sqrt();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            self.visit_mut("", &mut |_, p| p.g.scale(s));
        }
        norm
    }
}

/// Adam with linear warmup, keyed by parameter name.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    warmup: usize,
    step: usize,
    slots: std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, warmup: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup,
            step: 0,
            slots: std::collections::BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    fn lr_at(&self, step: usize) -> f64 {
        if self.warmup == 0 || step > self.warmup {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup as f64
        }
    }

    pub fn step<M: Params>(&mut self, model: &mut M) {
        self.step += 1;
        let t = self.step as f64;
        let lr = self.lr_at(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bias1 = 1.0 - self.beta1.powf(t);
        let bias2 = 1.0 - self.beta2.powf(t);
        let slots = &mut self.slots;
        model.visit_mut("", &mut |name, p| {
            let (m, v) = slots
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.count()], vec![0.0; p.count()]));
            for ((w, &g), (mi, vi)) in p
                .w
                .data
                .iter_mut()
                .zip(&p.g.data)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let mhat = *mi / bias1;
                let vhat = *vi / bias2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn matmul_agrees_with_hand_product() {
        let a = Mat::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Mat::from_rows(vec![vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = Mat::matmul(&a, &b);
        assert_eq!(c.data, vec![19.0, 22.0, 43.0, 50.0]);
        // A*B^T against the transpose route.
        let bt = Mat::from_rows(vec![vec![5.0, 7.0], vec![6.0, 8.0]]);
        assert_eq!(Mat::matmul_bt(&a, &bt).data, c.data);
    }

    #[test]
    fn softmax_masked_handles_all_masked_rows() {
        let mut s = vec![1.0, 2.0, 3.0];
        softmax_masked(&mut s, |_| false);
        assert_eq!(s, vec![0.0, 0.0, 0.0]);
        let mut s = vec![1.0, 2.0, f64::NEG_INFINITY];
        softmax_masked(&mut s, |j| j < 2);
        assert!((s[0] + s[1] - 1.0).abs() < 1e-12);
        assert_eq!(s[2], 0.0);
    }

    #[test]
    fn softplus_is_stable_and_positive() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-12);
        assert!((softplus(500.0) - 500.0).abs() < 1e-9);
        assert!(softplus(-500.0) > 0.0);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        struct One(Param);
        impl Params for One {
            fn visit(&self, _p: &str, f: &mut dyn FnMut(&str, &Param)) {
                f("x", &self.0);
            }
            fn visit_mut(&mut self, _p: &str, f: &mut dyn FnMut(&str, &mut Param)) {
                f("x", &mut self.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = One(Param::glorot(1, 1, &mut rng));
        m.0.w.data[0] = 5.0;
        let mut opt = Adam::new(0.1, 0);
        for _ in 0..500 {
            m.zero_grads();
            m.0.g.data[0] = 2.0 * m.0.w.data[0]; // d/dx x^2
            opt.step(&mut m);
        }
        assert!(m.0.w.data[0].abs() < 1e-3);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        struct One(Param);
        impl Params for One {
            fn visit(&self, _p: &str, f: &mut dyn FnMut(&str, &Param)) {
                f("x", &self.0);
            }
            fn visit_mut(&mut self, _p: &str, f: &mut dyn FnMut(&str, &mut Param)) {
                f("x", &mut self.0);
            }
        }
        let mut m = One(Param::zeros(1, 2));
        m.0.g.data = vec![3.0, 4.0];
        let norm = m.clip_grad_norm(1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped: f64 = m.0.g.data.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!((clipped - 1.0).abs() < 1e-12);
    }
}
