//! The characterizer network, column-cosine correlation matrices, the
//! correlation loss, and K-means over causal representations.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{CrclError, Result};
use crate::nn::{Bound, Conv, Linear, ParamStore};
use crate::tensor::Tensor;

/// Columns with norm at or below this are rejected as degenerate.
pub const EPS_COL: f64 = 1e-8;

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    proj: Option<Conv>,
}

impl ResBlock {
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = self.conv1.forward2d(g, p, x);
        let h = g.relu(h);
        let h = self.conv2.forward2d(g, p, h);
        let skip = match &self.proj {
            Some(c) => c.forward2d(g, p, x),
            None => x,
        };
        let y = g.add(h, skip);
        g.relu(y)
    }
}

/// Residual trunk, global average pool, and a linear head to `n` factors. The
/// same parameters map both the shared and the private branch.
#[derive(Clone, Debug)]
pub struct Characterizer {
    stem: Conv,
    blocks: Vec<ResBlock>,
    head: Linear,
    in_channels: usize,
    n: usize,
}

impl Characterizer {
    /// The first half of the blocks run at `width`, the rest at `2·width` with a
    /// stride-2 transition.
    pub fn new(
        store: &mut ParamStore,
        in_channels: usize,
        width: usize,
        blocks: usize,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let stem = Conv::planar(store, "cic.stem", in_channels, width, 3, 1, rng);
        let narrow = blocks.div_ceil(2);
        let mut list = Vec::with_capacity(blocks);
        let mut cin = width;
        for i in 0..blocks {
            let (cout, stride) = if i < narrow { (width, 1) } else if i == narrow { (2 * width, 2) } else { (2 * width, 1) };
            let name = format!("cic.block{i}");
            let conv1 = Conv::planar(store, &format!("{name}.conv1"), cin, cout, 3, stride, rng);
            let conv2 = Conv::planar(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng);
            let proj = (cin != cout || stride != 1)
                .then(|| Conv::planar(store, &format!("{name}.proj"), cin, cout, 1, stride, rng));
            list.push(ResBlock { conv1, conv2, proj });
            cin = cout;
        }
        let head = Linear::new(store, "cic.head", cin, n, rng);
        Self { stem, blocks: list, head, in_channels, n }
    }

    pub fn factors(&self) -> usize {
        self.n
    }

    /// `features: [b, C, H, W]` → representations `[b, n]`.
    pub fn characterize(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<Var> {
        let s = g.shape(features).to_vec();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(CrclError::Shape(format!("characterizer expects [b, {}, H, W], got {s:?}", self.in_channels)));
        }
        if s[0] < 2 {
            return Err(CrclError::InvalidArgument(format!("batch of {} < 2 for column correlations", s[0])));
        }
        let x = self.stem.forward2d(g, p, features);
        let mut x = g.relu(x);
        for block in &self.blocks {
            x = block.forward(g, p, x);
        }
        let xs = g.shape(x).to_vec();
        let flat = g.reshape(x, &[xs[0], xs[1], xs[2] * xs[3]]);
        let pooled = g.mean_axis(flat, 2);
        Ok(self.head.forward(g, p, pooled))
    }
}

/// Column-cosine matrices of a pair of `b × n` representations.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationTriple {
    pub c1: Tensor,
    pub c2: Tensor,
    pub c3: Tensor,
}

fn unit_columns(r: &Tensor, which: &'static str) -> Result<Tensor> {
    let s = r.shape();
    if s.len() != 2 {
        return Err(CrclError::Shape(format!("{which} must be b x n, got {s:?}")));
    }
    let (rows, cols) = (s[0], s[1]);
    let mut out = r.clone();
    for c in 0..cols {
        let norm = (0..rows).map(|i| r.data()[i * cols + c].powi(2)).sum::<f64>().sqrt();
        if !(norm > EPS_COL) {
            return Err(CrclError::DegenerateColumn { which, column: c, norm, eps: EPS_COL });
        }
        for i in 0..rows {
            out.data_mut()[i * cols + c] /= norm;
        }
    }
    Ok(out)
}

fn cross_cos(a: &Tensor, b: &Tensor) -> Tensor {
    let (rows, n) = (a.shape()[0], a.shape()[1]);
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let v: f64 = (0..rows).map(|r| a.data()[r * n + i] * b.data()[r * n + j]).sum();
            out.set(&[i, j], v.clamp(-1.0, 1.0));
        }
    }
    out
}

fn self_cos(a: &Tensor) -> Tensor {
    let (rows, n) = (a.shape()[0], a.shape()[1]);
    let mut out = Tensor::eye(n);
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = (0..rows).map(|r| a.data()[r * n + i] * a.data()[r * n + j]).sum();
            let v = v.clamp(-1.0, 1.0);
            out.set(&[i, j], v);
            out.set(&[j, i], v);
        }
    }
    out
}

/// `C1(i,j) = cos(f_i, f̃_j)`, `C2(i,j) = cos(f_i, f_j)`, `C3(i,j) = cos(f̃_i, f̃_j)`
/// over columns of `r` (shared branch) and `r_tilde` (private branch).
pub fn correlation_matrices(r: &Tensor, r_tilde: &Tensor) -> Result<CorrelationTriple> {
    if r.shape() != r_tilde.shape() {
        return Err(CrclError::Shape(format!("{:?} vs {:?}", r.shape(), r_tilde.shape())));
    }
    let a = unit_columns(r, "R")?;
    let b = unit_columns(r_tilde, "R_tilde")?;
    Ok(CorrelationTriple { c1: cross_cos(&a, &b), c2: self_cos(&a), c3: self_cos(&b) })
}

/// Which squared Frobenius terms enter the correlation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorrelationTerms {
    pub c1: bool,
    pub c2: bool,
    pub c3: bool,
}

impl CorrelationTerms {
    pub const ALL: Self = Self { c1: true, c2: true, c3: true };
}

pub fn fnorm_sq_from_identity(c: &Tensor) -> f64 {
    let n = c.shape()[0];
    c.data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let t = if i / n == i % n { 1.0 } else { 0.0 };
            (v - t).powi(2)
        })
        .sum()
}

/// `λ‖C1 − I‖² + ‖C2 − I‖² + ‖C3 − I‖²`, dropping disabled terms.
pub fn correlation_loss(triple: &CorrelationTriple, lambda: f64, terms: CorrelationTerms) -> f64 {
    let mut l = 0.0;
    if terms.c1 {
        l += lambda * fnorm_sq_from_identity(&triple.c1);
    }
    if terms.c2 {
        l += fnorm_sq_from_identity(&triple.c2);
    }
    if terms.c3 {
        l += fnorm_sq_from_identity(&triple.c3);
    }
    l
}

/// Mean cosine between corresponding columns, i.e. the mean diagonal of C1.
pub fn consistency_similarity(r: &Tensor, r_tilde: &Tensor) -> Result<f64> {
    let t = correlation_matrices(r, r_tilde)?;
    let n = t.c1.shape()[0];
    Ok((0..n).map(|i| t.c1.get(&[i, i])).sum::<f64>() / n as f64)
}

/// Graph handles of a correlation triple.
#[derive(Clone, Copy, Debug)]
pub struct TripleVars {
    pub c1: Var,
    pub c2: Var,
    pub c3: Var,
}

pub fn correlation_vars(g: &mut Graph, r: Var, r_tilde: Var) -> Result<TripleVars> {
    if g.shape(r) != g.shape(r_tilde) || g.shape(r).len() != 2 {
        return Err(CrclError::Shape(format!("{:?} vs {:?}", g.shape(r), g.shape(r_tilde))));
    }
    let a = g.normalize_cols(r, EPS_COL, "R")?;
    let b = g.normalize_cols(r_tilde, EPS_COL, "R_tilde")?;
    let at = g.transpose(a);
    let bt = g.transpose(b);
    let c1 = g.matmul(at, b);
    let c2 = g.matmul(at, a);
    let c3 = g.matmul(bt, b);
    Ok(TripleVars { c1, c2, c3 })
}

pub fn fnorm_sq_var(g: &mut Graph, c: Var) -> Var {
    let n = g.shape(c)[0];
    let neg_eye = Tensor::eye(n).map(|v| -v);
    let d = g.add_const(c, &neg_eye);
    let sq = g.square(d);
    g.sum_all(sq)
}

/// Differentiable counterpart of [`correlation_loss`]. Returns `None` when
/// every term is disabled.
pub fn correlation_loss_var(g: &mut Graph, t: &TripleVars, lambda: f64, terms: CorrelationTerms) -> Option<Var> {
    let mut parts = Vec::new();
    if terms.c1 {
        let f = fnorm_sq_var(g, t.c1);
        parts.push(g.scale(f, lambda));
    }
    if terms.c2 {
        parts.push(fnorm_sq_var(g, t.c2));
    }
    if terms.c3 {
        parts.push(fnorm_sq_var(g, t.c3));
    }
    parts.into_iter().reduce(|a, b| g.add(a, b))
}

/// Fitted K-means centers `[K, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    centers: Tensor,
}

impl ClusterModel {
    pub fn from_centers(centers: Tensor) -> Result<Self> {
        if centers.shape().len() != 2 || centers.shape()[0] == 0 {
            return Err(CrclError::Shape(format!("centers must be K x n with K >= 1, got {:?}", centers.shape())));
        }
        if !centers.is_finite() {
            return Err(CrclError::NonFinite("cluster centers"));
        }
        Ok(Self { centers })
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn k(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    /// Nearest center (ties to the lower index) and its squared distance.
    pub fn nearest(&self, row: &[f64]) -> (usize, f64) {
        let n = self.dim();
        let mut best = (0, f64::INFINITY);
        for k in 0..self.k() {
            let c = &self.centers.data()[k * n..(k + 1) * n];
            let d: f64 = c.iter().zip(row).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    /// Euclidean distance from `row` to its nearest center.
    pub fn distance(&self, row: &[f64]) -> f64 {
        self.nearest(row).1.sqrt()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd's algorithm from seeded farthest-point initialization. Returns the
/// model and the objective (mean squared distance) after each assignment step.
pub fn kmeans(reps: &Tensor, k: usize, seed: u64) -> Result<(ClusterModel, Vec<f64>)> {
    let s = reps.shape();
    if s.len() != 2 {
        return Err(CrclError::Shape(format!("representations must be m x n, got {s:?}")));
    }
    let (m, n) = (s[0], s[1]);
    if k == 0 || m < k {
        return Err(CrclError::InvalidArgument(format!("K-means with K={k} on {m} rows")));
    }
    if !reps.is_finite() {
        return Err(CrclError::NonFinite("K-means input"));
    }
    let row = |i: usize| &reps.data()[i * n..(i + 1) * n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..m)];
    let mut mind: Vec<f64> = (0..m).map(|i| sq_dist(row(i), row(chosen[0]))).collect();
    while chosen.len() < k {
        let mut far = 0;
        for i in 1..m {
            if mind[i] > mind[far] {
                far = i;
            }
        }
        chosen.push(far);
        for (i, d) in mind.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), row(far)));
        }
    }
    let mut centers = Tensor::zeros(&[k, n]);
    for (c, &i) in chosen.iter().enumerate() {
        centers.data_mut()[c * n..(c + 1) * n].copy_from_slice(row(i));
    }
    let mut model = ClusterModel { centers };
    let mut history = Vec::new();
    let mut assign = vec![0usize; m];
    for _ in 0..100 {
        let mut obj = 0.0;
        for (i, a) in assign.iter_mut().enumerate() {
            let (c, d) = model.nearest(row(i));
            *a = c;
            obj += d;
        }
        history.push(obj / m as f64);
        let mut sums = vec![0.0; k * n];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * n..(a + 1) * n].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let old = &mut model.centers.data_mut()[c * n..(c + 1) * n];
            let mut d = 0.0;
            for (o, s) in old.iter_mut().zip(&sums[c * n..(c + 1) * n]) {
                let new = s / counts[c] as f64;
                d += (new - *o).powi(2);
                *o = new;
            }
            shift = shift.max(d.sqrt());
        }
        if shift < 1e-4 {
            break;
        }
    }
    Ok((model, history))
}

/// Fit `K` centers to the rows of `reps: [m, n]`.
pub fn update_clusters(reps: &Tensor, k: usize, seed: u64) -> Result<ClusterModel> {
    kmeans(reps, k, seed).map(|(m, _)| m)
}

/// Mean squared distance from each row of `r: [b, n]` to its nearest center.
pub fn cluster_loss(g: &mut Graph, r: Var, model: Option<&ClusterModel>) -> Result<Var> {
    let model = model.ok_or_else(|| CrclError::InvalidArgument("cluster loss before any K-means fit".into()))?;
    let s = g.shape(r).to_vec();
    if s.len() != 2 || s[1] != model.dim() {
        return Err(CrclError::Shape(format!("representations {s:?} vs centers of width {}", model.dim())));
    }
    let n = s[1];
    let mut neg = Tensor::zeros(&s);
    for i in 0..s[0] {
        let (c, _) = model.nearest(&g.value(r).data()[i * n..(i + 1) * n]);
        for j in 0..n {
            neg.data_mut()[i * n + j] = -model.centers.data()[c * n + j];
        }
    }
    let d = g.add_const(r, &neg);
    let sq = g.square(d);
    let per_row = g.sum_axis(sq, 1);
    Ok(g.mean_all(per_row))
}
