//! Finite-difference verification of reverse-mode gradients.
//!
//! The numerical side only ever evaluates forward values, so it shares no code
//! path with [`Graph::backward`].

use crate::autograd::{Graph, Var};
use crate::nn::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Central-difference step used by [`check_gradients`].
pub const FD_STEP: f64 = 1e-6;

/// Norm-wise relative error `‖analytic − numeric‖∞ / max(‖numeric‖∞, 1e-8)`
/// between the reverse-mode gradient of the scalar `f` and its central-difference
/// estimate, taken over every element of every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor]) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let analytic = analytic_gradients(&f, inputs);
    let numeric = numeric_gradients(&f, inputs, FD_STEP);
    relative_error(&analytic, &numeric)
}

/// [`check_gradients`] over every parameter of `store` followed by `inputs`.
pub fn check_param_gradients<F>(store: &ParamStore, inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &Bound, &[Var]) -> Var,
{
    let np = store.len();
    let mut all: Vec<Tensor> = store.tensors().to_vec();
    all.extend_from_slice(inputs);
    check_gradients(
        |g, v| {
            let p = Bound::from_vars(v[..np].to_vec());
            f(g, &p, &v[np..])
        },
        &all,
    )
}

pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Vec<Tensor>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    vars.iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

pub fn numeric_gradients<F>(f: &F, inputs: &[Tensor], step: f64) -> Vec<Tensor>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut result = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[which].shape());
        for i in 0..inputs[which].numel() {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + step;
            let plus = eval(&work);
            work[which].data_mut()[i] = orig - step;
            let minus = eval(&work);
            work[which].data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        result.push(grad);
    }
    result
}

pub fn relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        diff = diff.max(a.max_abs_diff(n));
        scale = scale.max(n.data().iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    diff / scale.max(1e-8)
}
