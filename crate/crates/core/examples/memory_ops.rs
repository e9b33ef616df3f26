//! Write feature maps into a prototype memory, then read them back with
//! different top-k filters and report the losses that shape the features.

use crcl::autograd::Graph;
use crcl::memory::{memory_losses, memory_read, memory_write, read_weights, MemoryPool};
use crcl::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn column_norms(m: &Tensor) -> Vec<f64> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    (0..cols).map(|c| (0..rows).map(|r| m.get(&[r, c]).powi(2)).sum::<f64>().sqrt()).collect()
}

fn main() -> crcl::Result<()> {
    let (b, c, h, w, n) = (2, 8, 4, 4, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pool = MemoryPool::random(c, n, 3, &mut rng)?;
    let feats = Tensor::new(&[b, c, h, w], (0..b * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())?;

    let written = memory_write(&pool, &feats)?;
    let norms = column_norms(written.items());
    let worst = norms.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    println!("after write: {n} items, max |norm - 1| = {worst:.2e}");
    println!("item drift: {:.4}", written.items().max_abs_diff(pool.items()));

    for k in [1, 3, n] {
        let p = written.with_k(k)?;
        let wts = read_weights(&p, &feats)?;
        let q = h * w;
        let nonzero = wts.data().iter().filter(|v| **v > 0.0).count() as f64 / (b * q) as f64;
        let col_sum: f64 = (0..n).map(|i| wts.get(&[0, i, 0])).sum();
        let mut g = Graph::new();
        let f = g.input(feats.clone());
        let rec = memory_read(&mut g, &p, f)?;
        let err = g.value(rec).max_abs_diff(&feats);
        println!("k={k:>2}: {nonzero:.1} nonzero weights per query, weight sum {col_sum:.6}, max |F' - F| {err:.4}");
    }

    let mut g = Graph::new();
    let f = g.input(feats.clone());
    let (compact, separate) = memory_losses(&mut g, &written, f, 1.0)?;
    println!("L_compact {:.4}  L_separate {:.4}", g.value(compact).item(), g.value(separate).item());
    Ok(())
}
