//! Compare reverse-mode gradients with central differences for the correlation
//! loss and the scene KL term on random small inputs.

use crcl::autograd::Graph;
use crcl::cic::{correlation_loss_var, correlation_vars, CorrelationTerms};
use crcl::gradcheck::check_gradients;
use crcl::sdl::kl_mutual_loss;
use crcl::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (b, n) in [(4, 3), (3, 4), (4, 4)] {
        let inputs = [random(&[b, n], &mut rng), random(&[b, n], &mut rng)];
        let err = check_gradients(
            |g, v| {
                let t = correlation_vars(g, v[0], v[1]).expect("shapes");
                correlation_loss_var(g, &t, 10.0, CorrelationTerms::ALL).expect("terms")
            },
            &inputs,
        );
        println!("L_c      b={b} n={n}: relative error {err:.2e}");
    }
    for s in [2, 3] {
        let inputs = [random(&[3, s], &mut rng), random(&[3, s], &mut rng)];
        let err = check_gradients(
            |g: &mut Graph, v| {
                let ps = g.softmax(v[0], 1);
                let pm = g.softmax(v[1], 1);
                kl_mutual_loss(g, ps, pm).expect("shapes")
            },
            &inputs,
        );
        println!("L_KL     scenes={s}: relative error {err:.2e}");
    }
}
