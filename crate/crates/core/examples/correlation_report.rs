//! Correlation triples for hand-built representation pairs: a consistent pair
//! with independent factors, a pair whose private branch is unrelated noise, and
//! a pair with collapsed (redundant) factors.

use crcl::cic::{consistency_similarity, correlation_loss, correlation_matrices, fnorm_sq_from_identity, CorrelationTerms};
use crcl::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn print_matrix(name: &str, m: &Tensor) {
    println!("{name}:");
    let n = m.shape()[0];
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| format!("{:>6.2}", m.get(&[i, j]))).collect();
        println!("  {}", row.join(" "));
    }
}

fn report(label: &str, r: &Tensor, rt: &Tensor) -> crcl::Result<()> {
    let t = correlation_matrices(r, rt)?;
    println!("== {label}");
    print_matrix("C1", &t.c1);
    println!(
        "‖C1-I‖² {:.3}  ‖C2-I‖² {:.3}  ‖C3-I‖² {:.3}  L_c(λ=10) {:.3}  consistency {:.3}",
        fnorm_sq_from_identity(&t.c1),
        fnorm_sq_from_identity(&t.c2),
        fnorm_sq_from_identity(&t.c3),
        correlation_loss(&t, 10.0, CorrelationTerms::ALL),
        consistency_similarity(r, rt)?
    );
    Ok(())
}

fn main() -> crcl::Result<()> {
    let (b, n) = (8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut noise = |scale: f64| -> Tensor {
        Tensor::new(&[b, n], (0..b * n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).expect("shape")
    };

    // Orthogonal columns: each factor is active in its own pair of rows.
    let mut basis = Tensor::zeros(&[b, n]);
    for j in 0..n {
        basis.set(&[2 * j, j], 1.0);
        basis.set(&[2 * j + 1, j], -1.0);
    }
    let jitter = noise(0.05);
    let mut close = basis.clone();
    close.add_assign(&jitter);
    report("consistent", &basis, &close)?;

    report("unrelated private branch", &basis, &noise(1.0))?;

    let mut collapsed = Tensor::zeros(&[b, n]);
    for i in 0..b {
        for j in 0..n {
            collapsed.set(&[i, j], 1.0 + 0.01 * (i + j) as f64);
        }
    }
    report("collapsed factors", &collapsed, &collapsed)
}
