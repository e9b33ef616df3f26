//! Channel-gated split of a feature map and its memory prototype into private
//! and shared parts.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{CrclError, Result};
use crate::nn::{Bound, Linear, ParamStore};
use crate::tensor::Tensor;

/// Sigmoid gate scores `[B, C]` from the average- and max-pool branches.
#[derive(Clone, Copy, Debug)]
pub struct GateScores {
    pub alpha: Option<Var>,
    pub beta: Option<Var>,
    /// Channel weight applied to `F`; `F′` receives `1 − gate`.
    pub gate: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Decomposition {
    pub private: Var,
    pub shared: Var,
    pub scores: GateScores,
}

#[derive(Clone, Debug)]
struct GateMlp {
    hidden: Linear,
    out: Linear,
}

impl GateMlp {
    fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        let h = (c / 2).max(1);
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), c, h, rng),
            out: Linear::new(store, &format!("{name}.out"), h, c, rng),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = self.hidden.forward(g, p, x);
        let h = g.relu(h);
        let o = self.out.forward(g, p, h);
        g.sigmoid(o)
    }
}

#[derive(Clone, Debug)]
pub struct Decomposer {
    avg: GateMlp,
    max: GateMlp,
    use_avg: bool,
    use_max: bool,
}

impl Decomposer {
    pub fn new(store: &mut ParamStore, channels: usize, use_avg: bool, use_max: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            avg: GateMlp::new(store, "decomposer.avg", channels, rng),
            max: GateMlp::new(store, "decomposer.max", channels, rng),
            use_avg,
            use_max,
        }
    }

    /// Zero the final layer of both heads so every gate starts at exactly 0.5.
    pub fn zero_heads(&self, store: &mut ParamStore) {
        for mlp in [&self.avg, &self.max] {
            for id in [mlp.out.w, mlp.out.b] {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
    }

    /// `F_p = g ⊛ F`, `F_s = (1 − g) ⊛ F′` with `g = (α + β) / 2`, where α and β
    /// come from the avg- and max-pooled differences `pool(F) − pool(F′)`.
    pub fn decompose(&self, g: &mut Graph, p: &Bound, f: Var, f_proto: Var) -> Result<Decomposition> {
        let s = g.shape(f).to_vec();
        if s.len() != 4 || s.as_slice() != g.shape(f_proto) {
            return Err(CrclError::Shape(format!(
                "decomposer inputs differ: {s:?} vs {:?}",
                g.shape(f_proto)
            )));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let ff = g.reshape(f, &[b, c, hw]);
        let fp = g.reshape(f_proto, &[b, c, hw]);
        let alpha = if self.use_avg {
            let a = g.mean_axis(ff, 2);
            let a2 = g.mean_axis(fp, 2);
            let d = g.sub(a, a2);
            Some(self.avg.forward(g, p, d))
        } else {
            None
        };
        let beta = if self.use_max {
            let m = g.max_axis(ff, 2);
            let m2 = g.max_axis(fp, 2);
            let d = g.sub(m, m2);
            Some(self.max.forward(g, p, d))
        } else {
            None
        };
        let gate = match (alpha, beta) {
            (Some(a), Some(bv)) => {
                let sum = g.add(a, bv);
                g.scale(sum, 0.5)
            }
            (Some(a), None) => a,
            (None, Some(bv)) => bv,
            (None, None) => g.input(Tensor::full(&[b, c], 0.5)),
        };
        let neg = g.scale(gate, -1.0);
        let comp = g.add_scalar(neg, 1.0);
        let expand = |g: &mut Graph, v: Var| {
            let v = g.broadcast(v, 2, hw);
            g.reshape(v, &s)
        };
        let gate_map = expand(g, gate);
        let comp_map = expand(g, comp);
        let private = g.mul(f, gate_map);
        let shared = g.mul(f_proto, comp_map);
        Ok(Decomposition { private, shared, scores: GateScores { alpha, beta, gate } })
    }
}
