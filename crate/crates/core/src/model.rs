//! The assembled network: encoders, memory, decomposer, characterizer, scene
//! classifiers, and the fitted cluster model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::cic::{correlation_matrices, correlation_vars, Characterizer, ClusterModel, CorrelationTriple, TripleVars};
use crate::config::TrainConfig;
use crate::decomposer::{Decomposer, Decomposition};
use crate::encoders::{MotionEncoder, SceneEncoder};
use crate::error::{CrclError, Result};
use crate::memory::{memory_read, MemoryPool};
use crate::nn::{Bound, ParamStore};
use crate::sdl::SceneClassifier;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: TrainConfig,
    pub num_scenes: usize,
    pub store: ParamStore,
    pub memory: MemoryPool,
    pub clusters: Option<ClusterModel>,
    motion: MotionEncoder,
    scene: SceneEncoder,
    decomposer: Decomposer,
    cic: Characterizer,
    scene_classifier: SceneClassifier,
    motion_classifier: SceneClassifier,
}

/// Graph handles of one branch routed through memory read, decomposition, and
/// the characterizer.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutputs {
    pub features: Var,
    pub prototype: Var,
    pub parts: Decomposition,
    /// Shared-branch representations `[b, n]`.
    pub r: Var,
    /// Private-branch representations `[b, n]`.
    pub r_tilde: Var,
    pub triple: TripleVars,
}

#[derive(Clone, Copy, Debug)]
pub struct SceneOutputs {
    pub branch: BranchOutputs,
    /// `C_s` on the scene features.
    pub p_scene: Var,
    /// `C_m` on the motion features.
    pub p_motion: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutputs {
    pub motion: BranchOutputs,
    pub scene: Option<SceneOutputs>,
}

impl Model {
    /// Fresh parameters and memory, seeded by `cfg.seed`.
    pub fn new(cfg: &TrainConfig, num_scenes: usize) -> Result<Self> {
        cfg.validate()?;
        if num_scenes == 0 {
            return Err(CrclError::Dataset("dataset has no scenes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let motion = MotionEncoder::new(&mut store, cfg, &mut rng);
        let scene = SceneEncoder::new(&mut store, cfg, &mut rng);
        let decomposer = Decomposer::new(&mut store, cfg.channels, cfg.avg_pool, cfg.max_pool, &mut rng);
        let cic = Characterizer::new(&mut store, cfg.channels, cfg.cic_width, cfg.cic_blocks, cfg.n, &mut rng);
        let scene_classifier = SceneClassifier::new(&mut store, "classifier.scene", cfg.channels, num_scenes, &mut rng);
        let motion_classifier =
            SceneClassifier::new(&mut store, "classifier.motion", cfg.channels, num_scenes, &mut rng);
        let memory = MemoryPool::random(cfg.channels, cfg.n_mem, cfg.read_k(), &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            num_scenes,
            store,
            memory,
            clusters: None,
            motion,
            scene,
            decomposer,
            cic,
            scene_classifier,
            motion_classifier,
        })
    }

    /// Scene debiasing runs only when enabled and the data has more than one scene.
    pub fn sdl_active(&self) -> bool {
        self.cfg.sdl && self.num_scenes > 1
    }

    fn branch(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<BranchOutputs> {
        let prototype = memory_read(g, &self.memory, features)?;
        let parts = self.decomposer.decompose(g, p, features, prototype)?;
        let r = self.cic.characterize(g, p, parts.shared)?;
        let r_tilde = self.cic.characterize(g, p, parts.private)?;
        let triple = correlation_vars(g, r, r_tilde)?;
        Ok(BranchOutputs { features, prototype, parts, r, r_tilde, triple })
    }

    /// Motion path for `clips: [b, 3, T, S, S]`, plus the scene path when `with_scene`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, clips: Var, with_scene: bool) -> Result<ForwardOutputs> {
        let f_ent = self.motion.forward(g, p, clips)?;
        let motion = self.branch(g, p, f_ent)?;
        let scene = if with_scene {
            let f_sce = self.scene.forward(g, p, clips)?;
            let branch = self.branch(g, p, f_sce)?;
            let p_scene = self.scene_classifier.classify(g, p, f_sce)?;
            let p_motion = self.motion_classifier.classify(g, p, f_ent)?;
            Some(SceneOutputs { branch, p_scene, p_motion })
        } else {
            None
        };
        Ok(ForwardOutputs { motion, scene })
    }

    /// Frozen-model motion path: `(F_ent, R, R̃)` as plain tensors.
    pub fn infer(&self, clips: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.input(clips.clone());
        let out = self.forward(&mut g, &p, x, false)?;
        Ok((
            g.value(out.motion.features).clone(),
            g.value(out.motion.r).clone(),
            g.value(out.motion.r_tilde).clone(),
        ))
    }

    /// Correlation triple of a window of clips under the frozen model, with the
    /// shared-branch representations.
    pub fn window_triple(&self, clips: &Tensor) -> Result<(CorrelationTriple, Tensor)> {
        let (_, r, rt) = self.infer(clips)?;
        Ok((correlation_matrices(&r, &rt)?, r))
    }

    /// Scene-classifier probabilities `[B, N_s]` from the scene encoder.
    pub fn predict_scene(&self, clips: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.input(clips.clone());
        let f = self.scene.forward(&mut g, &p, x)?;
        let probs = self.scene_classifier.classify(&mut g, &p, f)?;
        Ok(g.value(probs).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            frame_size: 8,
            clip_len: 4,
            feature_size: 4,
            channels: 8,
            attn_channels: 4,
            cic_width: 4,
            cic_blocks: 2,
            n: 4,
            n_mem: 6,
            k: 2,
            k_clusters: 2,
            b: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(&tiny_cfg(), 2).unwrap();
        let b = Model::new(&tiny_cfg(), 2).unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(a.memory, b.memory);
        let c = Model::new(&TrainConfig { seed: 1, ..tiny_cfg() }, 2).unwrap();
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn forward_shapes() {
        let m = Model::new(&tiny_cfg(), 2).unwrap();
        let mut g = Graph::new();
        let p = m.store.bind(&mut g, false);
        let x = g.input(Tensor::full(&[3, 3, 4, 8, 8], 0.1));
        let out = m.forward(&mut g, &p, x, true).unwrap();
        assert_eq!(g.shape(out.motion.r), &[3, 4]);
        assert_eq!(g.shape(out.motion.triple.c1), &[4, 4]);
        let s = out.scene.unwrap();
        assert_eq!(g.shape(s.p_scene), &[3, 2]);
        assert_eq!(g.shape(s.branch.features), g.shape(out.motion.features));
    }

    #[test]
    fn sdl_off_for_single_scene() {
        assert!(!Model::new(&tiny_cfg(), 1).unwrap().sdl_active());
        assert!(Model::new(&tiny_cfg(), 2).unwrap().sdl_active());
    }
}
