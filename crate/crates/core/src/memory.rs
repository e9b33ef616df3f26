//! Prototype memory: attention-addressed write, top-k filtered read, and the
//! compactness/separateness losses.
//!
//! The pool is a `C × N` matrix whose columns are unit-norm items. Feature maps
//! `[B, C, H, W]` are flattened per item to `C × H·W` query columns.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{CrclError, Result};
use crate::tensor::{matmul_nn, matmul_tn, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryPool {
    items: Tensor,
    k: usize,
}

impl MemoryPool {
    /// Random unit-norm items.
    pub fn random(c: usize, n: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let data = (0..c * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self::from_matrix(normalize_columns(Tensor::new(&[c, n], data)?), k)
    }

    /// Wrap an existing `C × N` matrix. Columns must already be unit norm.
    pub fn from_matrix(items: Tensor, k: usize) -> Result<Self> {
        let s = items.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(CrclError::Shape(format!("memory must be C x N, got {s:?}")));
        }
        if k == 0 || k > s[1] {
            return Err(CrclError::InvalidArgument(format!("top-k {k} outside 1..={}", s[1])));
        }
        for (j, norm) in column_norms(&items).into_iter().enumerate() {
            if (norm - 1.0).abs() > 1e-5 {
                return Err(CrclError::InvalidArgument(format!("memory column {j} has norm {norm}")));
            }
        }
        Ok(Self { items, k })
    }

    pub fn items(&self) -> &Tensor {
        &self.items
    }

    pub fn channels(&self) -> usize {
        self.items.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.items.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn with_k(&self, k: usize) -> Result<Self> {
        Self::from_matrix(self.items.clone(), k)
    }

    fn queries(&self, f: &Tensor) -> Result<(usize, usize)> {
        let s = f.shape();
        if s.len() != 4 || s[1] != self.channels() {
            return Err(CrclError::Shape(format!(
                "memory expects [B, {}, H, W] features, got {s:?}",
                self.channels()
            )));
        }
        Ok((s[0], s[2] * s[3]))
    }
}

fn column_norms(m: &Tensor) -> Vec<f64> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut norms = vec![0.0; cols];
    for r in 0..rows {
        for (c, n) in norms.iter_mut().enumerate() {
            *n += m.data()[r * cols + c].powi(2);
        }
    }
    norms.into_iter().map(f64::sqrt).collect()
}

fn normalize_columns(mut m: Tensor) -> Tensor {
    let norms = column_norms(&m);
    let cols = m.shape()[1];
    for (i, v) in m.data_mut().iter_mut().enumerate() {
        let n = norms[i % cols];
        if n > 0.0 {
            *v /= n;
        }
    }
    m
}

/// Write one feature map per batch item in order. For each item,
/// `A = softmax over queries of (e(F)ᵀ M / √C)` and `M ← l2(M + e(F) · A)`.
pub fn memory_write(pool: &MemoryPool, features: &Tensor) -> Result<MemoryPool> {
    let (b, q) = pool.queries(features)?;
    if !features.is_finite() {
        return Err(CrclError::NonFinite("memory write features"));
    }
    let (c, n) = (pool.channels(), pool.len());
    let scale = 1.0 / (c as f64).sqrt();
    let mut m = pool.items.clone();
    let mut att = vec![0.0; q * n];
    for bi in 0..b {
        let f = &features.data()[bi * c * q..(bi + 1) * c * q];
        // att[q, n] = fᵀ · M
        matmul_tn(q, c, n, f, m.data(), &mut att, false);
        for col in 0..n {
            let mx = (0..q).map(|i| att[i * n + col]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for i in 0..q {
                let e = ((att[i * n + col] - mx) * scale).exp();
                att[i * n + col] = e;
                s += e;
            }
            for i in 0..q {
                att[i * n + col] /= s;
            }
        }
        matmul_nn(c, q, n, f, &att, m.data_mut(), true);
        m = normalize_columns(m);
    }
    Ok(MemoryPool { items: m, k: pool.k })
}

/// Filtered read weights `[B, N, H·W]` for the given features, outside any graph.
pub fn read_weights(pool: &MemoryPool, features: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.input(features.clone());
    let (_, w) = read_graph(&mut g, pool, f)?;
    Ok(g.value(w).clone())
}

fn read_graph(g: &mut Graph, pool: &MemoryPool, features: Var) -> Result<(Var, Var)> {
    let (b, q) = pool.queries(g.value(features))?;
    if pool.k > pool.len() {
        return Err(CrclError::InvalidArgument(format!("top-k {} exceeds {} items", pool.k, pool.len())));
    }
    let c = pool.channels();
    let flat = g.reshape(features, &[b, c, q]);
    let mt = pool.items.transpose().map(|v| v / (c as f64).sqrt());
    let logits = g.const_left_matmul(&mt, flat);
    let soft = g.softmax(logits, 1);
    let w = g.topk_renorm(soft, 1, pool.k);
    Ok((flat, w))
}

/// Prototype reconstruction `F′` of `features: [B, C, H, W]`. Differentiable with
/// respect to the features; the pool and the top-k mask are constants.
pub fn memory_read(g: &mut Graph, pool: &MemoryPool, features: Var) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    let (_, w) = read_graph(g, pool, features)?;
    let rec = g.const_left_matmul(&pool.items, w);
    Ok(g.reshape(rec, &shape))
}

/// `(L_compact, L_separate)` over every query column of `features`. Nearest and
/// second-nearest items are chosen by scaled dot product (ties to the lower index).
pub fn memory_losses(g: &mut Graph, pool: &MemoryPool, features: Var, margin: f64) -> Result<(Var, Var)> {
    let (b, q) = pool.queries(g.value(features))?;
    let (c, n) = (pool.channels(), pool.len());
    if n < 2 {
        return Err(CrclError::InvalidArgument("separateness needs at least two memory items".into()));
    }
    let fv = g.value(features).data().to_vec();
    let md = pool.items.data();
    let mut p1 = vec![0.0; b * c * q];
    let mut p2 = vec![0.0; b * c * q];
    let mut sims = vec![0.0; q * n];
    for bi in 0..b {
        let f = &fv[bi * c * q..(bi + 1) * c * q];
        matmul_tn(q, c, n, f, md, &mut sims, false);
        for i in 0..q {
            let row = &sims[i * n..(i + 1) * n];
            let (mut first, mut second) = (0usize, usize::MAX);
            for j in 1..n {
                if row[j] > row[first] {
                    second = first;
                    first = j;
                } else if second == usize::MAX || row[j] > row[second] {
                    second = j;
                }
            }
            if second == usize::MAX {
                second = 1;
            }
            for ch in 0..c {
                p1[(bi * c + ch) * q + i] = md[ch * n + first];
                p2[(bi * c + ch) * q + i] = md[ch * n + second];
            }
        }
    }
    let flat = g.reshape(features, &[b, c, q]);
    let neg1 = Tensor::from_parts(vec![b, c, q], p1.iter().map(|v| -v).collect());
    let neg2 = Tensor::from_parts(vec![b, c, q], p2.iter().map(|v| -v).collect());
    let d1 = g.add_const(flat, &neg1);
    let d1 = g.square(d1);
    let d1 = g.sum_axis(d1, 1);
    let d2 = g.add_const(flat, &neg2);
    let d2 = g.square(d2);
    let d2 = g.sum_axis(d2, 1);
    let compact = g.mean_all(d1);
    let gap = g.sub(d1, d2);
    let gap = g.add_scalar(gap, margin);
    let hinge = g.relu(gap);
    let separate = g.mean_all(hinge);
    Ok((compact, separate))
}
