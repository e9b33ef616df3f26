//! Motion encoder with channel-variance temporal attention, and the scene encoder.
//!
//! Both produce `[B, C, H, W]` feature maps so either can be routed through the
//! memory, decomposer, and characterizer.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvGeom, Graph, Var};
use crate::config::TrainConfig;
use crate::error::{CrclError, Result};
use crate::nn::{Bound, Conv, ParamStore};

/// Graph handles of the attention computation for a batch.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMaps {
    /// Compressed features `[B, D_c, H, W]`.
    pub compressed: Var,
    /// Channel variance `[B, H*W]`.
    pub variance: Var,
    /// Squared spatial softmax of the variance `[B, H*W]`.
    pub attention: Var,
}

/// Variance and attention maps from already-compressed features `[B, D, H, W]`:
/// `V(i,j) = mean_k (S(i,j,k) − mean_k S(i,j,·))²` and `G = softmax_{i,j}(V)²`.
pub fn attention_from_compressed(g: &mut Graph, compressed: Var) -> (Var, Var) {
    let s = g.shape(compressed).to_vec();
    let (b, d, hw) = (s[0], s[1], s[2] * s[3]);
    let flat = g.reshape(compressed, &[b, d, hw]);
    let mean = g.mean_axis(flat, 1);
    let mean_b = g.broadcast(mean, 1, d);
    let centered = g.sub(flat, mean_b);
    let sq = g.square(centered);
    let variance = g.mean_axis(sq, 1);
    let soft = g.softmax(variance, 1);
    let attention = g.square(soft);
    (variance, attention)
}

#[derive(Clone, Debug)]
pub struct MotionEncoder {
    stages: Vec<Conv>,
    compress: Conv,
    out: Conv,
    feature_size: usize,
    channels: usize,
    clip_len: usize,
    frame_size: usize,
    use_attention: bool,
}

impl MotionEncoder {
    pub fn new(store: &mut ParamStore, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let widths = [c / 4, c / 2, c];
        let mut stages = Vec::with_capacity(3);
        let (mut cin, mut t, mut s) = (3, cfg.clip_len, cfg.frame_size);
        for (i, &w) in widths.iter().enumerate() {
            let st = if t > 1 { 2 } else { 1 };
            let ss = if s >= 2 * cfg.feature_size { 2 } else { 1 };
            let geom = ConvGeom::new([st, ss, ss], [1, 1, 1]);
            stages.push(Conv::new(store, &format!("motion.stage{i}"), cin, w, [3, 3, 3], geom, rng));
            t = geom.out_dim(0, t, 3);
            s = geom.out_dim(1, s, 3);
            cin = w;
        }
        let compress = Conv::planar(store, "motion.compress", c, cfg.attn_channels, 3, 1, rng);
        let out = Conv::planar(store, "motion.out", c, c, 3, 1, rng);
        Self {
            stages,
            compress,
            out,
            feature_size: cfg.feature_size,
            channels: c,
            clip_len: cfg.clip_len,
            frame_size: cfg.frame_size,
            use_attention: cfg.temporal_attention,
        }
    }

    fn check_input(&self, g: &Graph, clips: Var) -> Result<()> {
        let s = g.shape(clips);
        if s.len() != 5 || s[1] != 3 || s[2] != self.clip_len || s[3] != self.frame_size || s[4] != self.frame_size {
            return Err(CrclError::Shape(format!(
                "motion encoder expects [B, 3, {}, {s2}, {s2}], got {s:?}",
                self.clip_len,
                s2 = self.frame_size
            )));
        }
        if !g.value(clips).is_finite() {
            return Err(CrclError::NonFinite("motion encoder input"));
        }
        Ok(())
    }

    /// Trunk output before attention, `[B, C, H, W]`.
    fn base(&self, g: &mut Graph, p: &Bound, clips: Var) -> Var {
        let mut x = clips;
        for stage in &self.stages {
            let y = stage.forward(g, p, x);
            x = g.leaky_relu(y, 0.1);
        }
        let s = g.shape(x).to_vec();
        let (b, c, t) = (s[0], s[1], s[2]);
        let mut x = if t > 1 {
            g.mean_axis(x, 2)
        } else {
            g.reshape(x, &[b, c, s[3], s[4]])
        };
        if g.shape(x)[2] != self.feature_size || g.shape(x)[3] != self.feature_size {
            x = g.adaptive_avg_pool(x, self.feature_size, self.feature_size);
        }
        x
    }

    /// Compress `features` with the 3×3 convolution and derive the attention maps.
    pub fn temporal_attention(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<AttentionMaps> {
        if !g.value(features).is_finite() {
            return Err(CrclError::NonFinite("temporal attention input"));
        }
        let compressed = self.compress.forward2d(g, p, features);
        let (variance, attention) = attention_from_compressed(g, compressed);
        Ok(AttentionMaps { compressed, variance, attention })
    }

    /// `clips: [B, 3, T, S, S]` → entangled motion features `[B, C, H, W]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, clips: Var) -> Result<Var> {
        self.check_input(g, clips)?;
        let base = self.base(g, p, clips);
        let gated = if self.use_attention {
            let maps = self.temporal_attention(g, p, base)?;
            let gate = g.add_scalar(maps.attention, 1.0);
            let gate = g.broadcast(gate, 1, self.channels);
            let s = g.shape(base).to_vec();
            let gate = g.reshape(gate, &s);
            g.mul(base, gate)
        } else {
            base
        };
        Ok(self.out.forward2d(g, p, gated))
    }
}

#[derive(Clone, Debug)]
pub struct SceneEncoder {
    layers: Vec<Conv>,
    feature_size: usize,
    clip_len: usize,
    frame_size: usize,
}

impl SceneEncoder {
    pub fn new(store: &mut ParamStore, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let widths = [c / 4, c / 2, c, c];
        let mut layers = Vec::with_capacity(4);
        let (mut cin, mut s) = (3, cfg.frame_size);
        for (i, &w) in widths.iter().enumerate() {
            let stride = if s >= 2 * cfg.feature_size { 2 } else { 1 };
            layers.push(Conv::planar(store, &format!("scene.conv{i}"), cin, w, 3, stride, rng));
            s = ConvGeom::planar(stride, 1).out_dim(1, s, 3);
            cin = w;
        }
        Self { layers, feature_size: cfg.feature_size, clip_len: cfg.clip_len, frame_size: cfg.frame_size }
    }

    /// `clips: [B, 3, T, S, S]` → scene features `[B, C, H, W]` from the temporal mean frame.
    pub fn forward(&self, g: &mut Graph, p: &Bound, clips: Var) -> Result<Var> {
        let s = g.shape(clips).to_vec();
        if s.len() != 5 || s[1] != 3 || s[2] != self.clip_len || s[3] != self.frame_size || s[4] != self.frame_size {
            return Err(CrclError::Shape(format!("scene encoder got {s:?}")));
        }
        let mut x = g.mean_axis(clips, 2);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward2d(g, p, x);
            if i < last {
                x = g.leaky_relu(x, 0.1);
            }
        }
        if g.shape(x)[2] != self.feature_size {
            x = g.adaptive_avg_pool(x, self.feature_size, self.feature_size);
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            frame_size: 8,
            clip_len: 4,
            feature_size: 4,
            channels: 8,
            attn_channels: 4,
            ..TrainConfig::default()
        }
    }

    fn clip_batch(b: usize, cfg: &TrainConfig, seed: u64) -> Tensor {
        let n = b * 3 * cfg.clip_len * cfg.frame_size * cfg.frame_size;
        let data = (0..n).map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0) - 1.0).collect();
        Tensor::new(&[b, 3, cfg.clip_len, cfg.frame_size, cfg.frame_size], data).unwrap()
    }

    #[test]
    fn constant_channels_give_zero_variance_and_uniform_attention() {
        let mut g = Graph::new();
        let s = g.input(Tensor::full(&[1, 3, 2, 2], 0.7));
        let (v, a) = attention_from_compressed(&mut g, s);
        assert!(g.value(v).data().iter().all(|&x| x.abs() < 1e-15));
        for &x in g.value(a).data() {
            assert!((x - 1.0 / 16.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_case_variance_and_attention() {
        // Locations (row-major) carry channel pairs (0,0), (0,2), (1,1), (3,3).
        let s = Tensor::new(&[1, 2, 2, 2], vec![0.0, 0.0, 1.0, 3.0, 0.0, 2.0, 1.0, 3.0]).unwrap();
        let mut g = Graph::new();
        let sv = g.input(s);
        let (v, a) = attention_from_compressed(&mut g, sv);
        assert_eq!(g.value(v).data(), &[0.0, 1.0, 0.0, 0.0]);
        let e = std::f64::consts::E;
        let z = 3.0 + e;
        let want = [(1.0 / z).powi(2), (e / z).powi(2), (1.0 / z).powi(2), (1.0 / z).powi(2)];
        for (got, w) in g.value(a).data().iter().zip(want) {
            assert!((got - w).abs() < 1e-15);
        }
    }

    #[test]
    fn sqrt_attention_sums_to_one_and_shift_invariant() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 4 * 9).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let s = g.input(Tensor::new(&[2, 4, 3, 3], data.clone()).unwrap());
        let (v, a) = attention_from_compressed(&mut g, s);
        for b in 0..2 {
            let sum: f64 = g.value(a).data()[b * 9..(b + 1) * 9].iter().map(|x| x.sqrt()).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        // Shift V by a constant: softmax then square is unchanged.
        let shifted = g.add_scalar(v, 5.0);
        let soft = g.softmax(shifted, 1);
        let a2 = g.square(soft);
        assert!(g.value(a2).max_abs_diff(g.value(a)) < 1e-15);
    }

    #[test]
    fn attention_path_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = TrainConfig { channels: 4, attn_channels: 2, ..tiny_cfg() };
        let mut store = ParamStore::new();
        let enc = MotionEncoder::new(&mut store, &cfg, &mut rng);
        let w = store.get(enc.compress.w).clone();
        let bias = store.get(enc.compress.b).clone();
        let geom = enc.compress.geom;
        let input = Tensor::new(&[2, 4, 3, 3], (0..72).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect()).unwrap();
        let err = check_gradients(
            |g, v| {
                let s = g.shape(v[0]).to_vec();
                let x5 = g.reshape(v[0], &[s[0], s[1], 1, s[2], s[3]]);
                let c = g.conv(x5, v[1], v[2], geom);
                let cs = g.shape(c).to_vec();
                let c4 = g.reshape(c, &[cs[0], cs[1], cs[3], cs[4]]);
                let (_, a) = attention_from_compressed(g, c4);
                let gate = g.add_scalar(a, 1.0);
                let gate = g.broadcast(gate, 1, 4);
                let gate = g.reshape(gate, &[2, 4, 3, 3]);
                let y = g.mul(v[0], gate);
                g.sum_all(y)
            },
            &[input, w, bias],
        );
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn output_shapes_and_zero_input_sanity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let m = MotionEncoder::new(&mut store, &cfg, &mut rng);
        let s = SceneEncoder::new(&mut store, &cfg, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.input(Tensor::zeros(&[2, 3, 4, 8, 8]));
        let fm = m.forward(&mut g, &p, x).unwrap();
        let fs = s.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(fm), &[2, 8, 4, 4]);
        assert_eq!(g.shape(fs), g.shape(fm));
        assert!(g.value(fm).is_finite() && g.value(fs).is_finite());
    }

    #[test]
    fn non_power_of_two_frames_are_pooled_to_feature_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = TrainConfig { frame_size: 14, ..tiny_cfg() };
        let mut store = ParamStore::new();
        let m = MotionEncoder::new(&mut store, &cfg, &mut rng);
        let s = SceneEncoder::new(&mut store, &cfg, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.input(Tensor::zeros(&[1, 3, 4, 14, 14]));
        let fm = m.forward(&mut g, &p, x).unwrap();
        let fs = s.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(fm), &[1, 8, 4, 4]);
        assert_eq!(g.shape(fs), &[1, 8, 4, 4]);
    }

    #[test]
    fn batching_matches_single_items_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let m = MotionEncoder::new(&mut store, &cfg, &mut rng);
        let s = SceneEncoder::new(&mut store, &cfg, &mut rng);
        let batch = clip_batch(3, &cfg, 5);
        let run = |x: Tensor| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let xv = g.input(x);
            let a = m.forward(&mut g, &p, xv).unwrap();
            let b = s.forward(&mut g, &p, xv).unwrap();
            (g.value(a).clone(), g.value(b).clone())
        };
        let (all_m, all_s) = run(batch.clone());
        for i in 0..3 {
            let item = Tensor::stack(&[batch.index_axis0(i)]).unwrap();
            let (one_m, one_s) = run(item);
            assert!(one_m.index_axis0(0).max_abs_diff(&all_m.index_axis0(i)) < 1e-6);
            assert!(one_s.index_axis0(0).max_abs_diff(&all_s.index_axis0(i)) < 1e-6);
        }
        assert_eq!(run(batch.clone()), (all_m, all_s));
    }

    #[test]
    fn wrong_clip_shape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let m = MotionEncoder::new(&mut store, &cfg, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.input(Tensor::zeros(&[1, 3, 5, 8, 8]));
        assert!(m.forward(&mut g, &p, x).is_err());
    }
}
