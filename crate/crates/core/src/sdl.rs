//! Scene debiasing: scene classifiers on the scene and motion features, the
//! cross-entropy and mutual KL losses, and the triplet hinge between the
//! correlation triples of the two branches.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::cic::{fnorm_sq_var, TripleVars};
use crate::error::{CrclError, Result};
use crate::nn::{Bound, Linear, ParamStore};
use crate::tensor::Tensor;

/// Probability floor used inside every logarithm.
pub const PROB_EPS: f64 = 1e-12;

/// Global average pool followed by a two-layer perceptron and a softmax over scenes.
#[derive(Clone, Debug)]
pub struct SceneClassifier {
    hidden: Linear,
    out: Linear,
    channels: usize,
    num_scenes: usize,
}

impl SceneClassifier {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, num_scenes: usize, rng: &mut ChaCha8Rng) -> Self {
        let h = (channels / 2).max(1);
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), channels, h, rng),
            out: Linear::new(store, &format!("{name}.out"), h, num_scenes.max(1), rng),
            channels,
            num_scenes: num_scenes.max(1),
        }
    }

    pub fn num_scenes(&self) -> usize {
        self.num_scenes
    }

    /// `features: [B, C, H, W]` → scene probabilities `[B, N_s]`.
    pub fn classify(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<Var> {
        let s = g.shape(features).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(CrclError::Shape(format!("scene classifier expects [B, {}, H, W], got {s:?}", self.channels)));
        }
        let flat = g.reshape(features, &[s[0], s[1], s[2] * s[3]]);
        let pooled = g.mean_axis(flat, 2);
        let h = self.hidden.forward(g, p, pooled);
        let h = g.relu(h);
        let logits = self.out.forward(g, p, h);
        Ok(g.softmax(logits, 1))
    }
}

/// `−(1/b) Σ_i log p_i[y_i]` with probabilities floored at [`PROB_EPS`].
pub fn scene_ce_loss(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(probs).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(CrclError::Shape(format!("{} labels for predictions {s:?}", labels.len())));
    }
    let mut onehot = Tensor::zeros(&s);
    for (i, &y) in labels.iter().enumerate() {
        if y >= s[1] {
            return Err(CrclError::InvalidArgument(format!("scene label {y} outside 0..{}", s[1])));
        }
        onehot.set(&[i, y], -1.0 / s[0] as f64);
    }
    let logp = g.ln_clamped(probs, PROB_EPS);
    let w = g.input(onehot);
    let picked = g.mul(logp, w);
    Ok(g.sum_all(picked))
}

/// Batch mean of `KL(p_s‖p_m) + KL(p_m‖p_s) = Σ (p_s − p_m)(ln p_s − ln p_m)`.
pub fn kl_mutual_loss(g: &mut Graph, p_s: Var, p_m: Var) -> Result<Var> {
    let s = g.shape(p_s).to_vec();
    if s.len() != 2 || s.as_slice() != g.shape(p_m) {
        return Err(CrclError::Shape(format!("{s:?} vs {:?}", g.shape(p_m))));
    }
    let ls = g.ln_clamped(p_s, PROB_EPS);
    let lm = g.ln_clamped(p_m, PROB_EPS);
    let dp = g.sub(p_s, p_m);
    let dl = g.sub(ls, lm);
    let prod = g.mul(dp, dl);
    let total = g.sum_all(prod);
    Ok(g.scale(total, 1.0 / s[0] as f64))
}

/// `d(triple, I) = λ‖C1 − I‖² + ‖C2 − I‖² + ‖C3 − I‖²`.
pub fn triple_distance(g: &mut Graph, t: &TripleVars, lambda: f64) -> Var {
    let a = fnorm_sq_var(g, t.c1);
    let a = g.scale(a, lambda);
    let b = fnorm_sq_var(g, t.c2);
    let c = fnorm_sq_var(g, t.c3);
    let ab = g.add(a, b);
    g.add(ab, c)
}

/// `max(d_motion − d_scene + margin, 0)`.
pub fn triplet_hinge(d_motion: f64, d_scene: f64, margin: f64) -> f64 {
    (d_motion - d_scene + margin).max(0.0)
}

pub fn triplet_consistency_loss(
    g: &mut Graph,
    motion: &TripleVars,
    scene: &TripleVars,
    lambda: f64,
    margin: f64,
) -> Var {
    let dm = triple_distance(g, motion, lambda);
    let ds = triple_distance(g, scene, lambda);
    let diff = g.sub(dm, ds);
    let shifted = g.add_scalar(diff, margin);
    g.relu(shifted)
}
