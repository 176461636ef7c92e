//! Run configuration: flat `key value` text.

use std::fmt::Write as _;
use std::path::Path;

use crate::losses::{DEFAULT_ALPHA, DEFAULT_BETA};
use crate::nn::AdamConfig;
use crate::optimizer::OptimizerConfig;
use crate::renderer::RenderConfig;
use crate::synth::SceneConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Scene seeds used for pretraining.
    pub scenes: Vec<u64>,
    /// Held-out scene for fine-tuning and evaluation.
    pub eval_scene: u64,
    pub views: usize,
    pub image_size: usize,
    pub fov_deg: f64,
    /// View `i` is held out when `i % holdout_every == holdout_every / 2`.
    pub holdout_every: usize,
    pub lr_features: f64,
    pub lr_renderer: f64,
    pub lr_optimizer: f64,
    pub ft_lr_features: f64,
    pub ft_lr_renderer: f64,
    pub ft_lr_optimizer: f64,
    pub clip: f64,
    pub neighbors_pretrain: usize,
    pub neighbors_eval: usize,
    pub ray_batch: usize,
    pub samples: usize,
    pub pretrain_iters: u64,
    pub finetune_iters: u64,
    pub beta: f64,
    pub alpha: f64,
    pub t_max: usize,
    pub eps: f64,
    pub twist_cap: f64,
    pub depth_cap: f64,
    pub patch: usize,
    pub patches: usize,
    pub hidden: usize,
    pub enc_width: usize,
    pub near: f64,
    pub far: f64,
    /// Fraction of training batches started from perturbed true poses
    /// instead of the identity-plus-noise initialisation.
    pub mixed_init: f64,
    pub init_rot_deg: f64,
    pub init_trans_frac: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub min_matches: usize,
    pub ba_steps: u64,
    pub ba_lr: f64,
    pub ba_noise_deg: f64,
    pub ba_frequencies: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: vec![0, 1, 2, 3],
            eval_scene: 100,
            views: 12,
            image_size: 96,
            fov_deg: 60.0,
            holdout_every: 6,
            lr_features: 1e-3,
            lr_renderer: 5e-4,
            lr_optimizer: 2e-4,
            ft_lr_features: 5e-4,
            ft_lr_renderer: 2e-4,
            ft_lr_optimizer: 1e-5,
            clip: 1.0,
            neighbors_pretrain: 5,
            neighbors_eval: 10,
            ray_batch: 512,
            samples: 64,
            pretrain_iters: 20_000,
            finetune_iters: 2_000,
            beta: DEFAULT_BETA,
            alpha: DEFAULT_ALPHA,
            t_max: 4,
            eps: 0.05,
            twist_cap: 0.2,
            depth_cap: 0.15,
            patch: 16,
            patches: 8,
            hidden: 32,
            enc_width: 24,
            near: 2.0,
            far: 12.0,
            mixed_init: 1.0,
            init_rot_deg: 5.0,
            init_trans_frac: 0.05,
            checkpoint_every: 1_000,
            log_every: 50,
            min_matches: 30,
            ba_steps: 2_000,
            ba_lr: 1e-5,
            ba_noise_deg: 0.5,
            ba_frequencies: 6,
        }
    }
}

macro_rules! fields {
    ($m:ident) => {
        $m!(seed, u64);
        $m!(scenes, list);
        $m!(eval_scene, u64);
        $m!(views, usize);
        $m!(image_size, usize);
        $m!(fov_deg, f64);
        $m!(holdout_every, usize);
        $m!(lr_features, f64);
        $m!(lr_renderer, f64);
        $m!(lr_optimizer, f64);
        $m!(ft_lr_features, f64);
        $m!(ft_lr_renderer, f64);
        $m!(ft_lr_optimizer, f64);
        $m!(clip, f64);
        $m!(neighbors_pretrain, usize);
        $m!(neighbors_eval, usize);
        $m!(ray_batch, usize);
        $m!(samples, usize);
        $m!(pretrain_iters, u64);
        $m!(finetune_iters, u64);
        $m!(beta, f64);
        $m!(alpha, f64);
        $m!(t_max, usize);
        $m!(eps, f64);
        $m!(twist_cap, f64);
        $m!(depth_cap, f64);
        $m!(patch, usize);
        $m!(patches, usize);
        $m!(hidden, usize);
        $m!(enc_width, usize);
        $m!(near, f64);
        $m!(far, f64);
        $m!(mixed_init, f64);
        $m!(init_rot_deg, f64);
        $m!(init_trans_frac, f64);
        $m!(checkpoint_every, u64);
        $m!(log_every, u64);
        $m!(min_matches, usize);
        $m!(ba_steps, u64);
        $m!(ba_lr, f64);
        $m!(ba_noise_deg, f64);
        $m!(ba_frequencies, usize);
    };
}

/// Keys that fix parameter shapes or the meaning of the learned weights.
const MODEL_KEYS: [&str; 12] =
    ["image_size", "fov_deg", "samples", "near", "far", "t_max", "twist_cap", "depth_cap", "patch", "patches", "hidden", "enc_width"];

impl RunConfig {
    /// One `key value` line per field, in declaration order. Floats use the
    /// shortest representation that parses back to the same value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        macro_rules! emit {
            ($f:ident, list) => {
                let v: Vec<String> = self.$f.iter().map(|x| x.to_string()).collect();
                let _ = writeln!(s, "{} {}", stringify!($f), v.join(","));
            };
            ($f:ident, $t:ty) => {
                let _ = writeln!(s, "{} {:?}", stringify!($f), self.$f);
            };
        }
        fields!(emit);
        s
    }

    /// Missing keys keep their defaults; unknown keys are an error.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut c = Self::default();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once(char::is_whitespace).map(|(k, v)| (k, v.trim())).unwrap_or((line, ""));
            let bad = |m: String| Error::parse(source_name, ln + 1, m);
            let mut known = false;
            macro_rules! assign {
                ($f:ident, list) => {
                    if key == stringify!($f) {
                        known = true;
                        c.$f = value
                            .split(',')
                            .filter(|s| !s.trim().is_empty())
                            .map(|s| s.trim().parse().map_err(|e| bad(format!("{key}: {e}"))))
                            .collect::<Result<Vec<_>>>()?;
                    }
                };
                ($f:ident, $t:ty) => {
                    if key == stringify!($f) {
                        known = true;
                        c.$f = value.parse::<$t>().map_err(|e| bad(format!("{key}: {e}")))?;
                    }
                };
            }
            fields!(assign);
            if !known {
                return Err(bad(format!("unknown key `{key}`")));
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr_features", self.lr_features),
            ("lr_renderer", self.lr_renderer),
            ("lr_optimizer", self.lr_optimizer),
            ("ft_lr_features", self.ft_lr_features),
            ("ft_lr_renderer", self.ft_lr_renderer),
            ("ft_lr_optimizer", self.ft_lr_optimizer),
            ("ba_lr", self.ba_lr),
            ("clip", self.clip),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.neighbors_pretrain == 0 || self.neighbors_eval == 0 {
            return Err(Error::Config("neighbour counts must be >= 1".into()));
        }
        if self.views < 3 || self.holdout_every < 2 {
            return Err(Error::Config("need at least 3 views and holdout_every >= 2".into()));
        }
        if self.image_size < 64 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!("image_size {} must be a multiple of 8 and >= 64", self.image_size)));
        }
        if self.ray_batch == 0 || self.samples < 2 {
            return Err(Error::Config("ray_batch >= 1 and samples >= 2 required".into()));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::Config(format!("need 0 < near < far, got {} {}", self.near, self.far)));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.mixed_init) {
            return Err(Error::Config("alpha and mixed_init must lie in [0,1]".into()));
        }
        if self.patch < 4 || self.patch % 2 != 0 || self.patches == 0 {
            return Err(Error::Config("patch must be even and >= 4, patches >= 1".into()));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("log_every and checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// FNV-1a over the model-defining lines of [`to_text`](Self::to_text).
    pub fn config_hash(&self) -> u64 {
        let text = self.to_text();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for line in text.lines() {
            let key = line.split_whitespace().next().unwrap_or("");
            if MODEL_KEYS.contains(&key) {
                for b in line.bytes().chain(std::iter::once(b'\n')) {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn is_heldout(&self, view: usize) -> bool {
        view % self.holdout_every == self.holdout_every / 2
    }

    pub fn train_views(&self) -> Vec<usize> {
        (0..self.views).filter(|&v| !self.is_heldout(v)).collect()
    }

    pub fn heldout_views(&self) -> Vec<usize> {
        (0..self.views).filter(|&v| self.is_heldout(v)).collect()
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            patch: self.patch,
            patches: self.patches,
            hidden: self.hidden,
            enc_width: self.enc_width,
            t_max: self.t_max,
            eps: self.eps,
            twist_cap: self.twist_cap,
            depth_cap: self.depth_cap,
            near: self.near,
            far: self.far,
            ..OptimizerConfig::default()
        }
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig { near: self.near, far: self.far, samples: self.samples }
    }

    pub fn scene_config(&self, seed: u64) -> SceneConfig {
        SceneConfig { seed, near: self.near, far: self.far, ..SceneConfig::default() }
    }

    pub fn pretrain_adam(&self) -> AdamConfig {
        AdamConfig { lr: [self.lr_features, self.lr_renderer, self.lr_optimizer], clip: self.clip, ..AdamConfig::default() }
    }

    pub fn finetune_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: [self.ft_lr_features, self.ft_lr_renderer, self.ft_lr_optimizer],
            clip: self.clip,
            ..AdamConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text(), "t").unwrap(), c);
        assert_eq!(c.neighbors_pretrain, 5);
        assert_eq!(c.neighbors_eval, 10);
        assert_eq!(c.heldout_views(), vec![3, 9]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::parse("bogus 1\n", "t"), Err(Error::Parse { line: 1, .. })));
        assert!(RunConfig::parse("lr_renderer 0\n", "t").is_err());
        assert!(RunConfig::parse("neighbors_eval 0\n", "t").is_err());
        assert!(RunConfig::parse("views x\n", "t").is_err());
    }

    #[test]
    fn hash_tracks_model_keys_only() {
        let a = RunConfig::default();
        let b = RunConfig { pretrain_iters: 3, lr_renderer: 1.0, scenes: vec![7], ..a.clone() };
        assert_eq!(a.config_hash(), b.config_hash());
        let c = RunConfig { hidden: 16, ..a.clone() };
        assert_ne!(a.config_hash(), c.config_hash());
    }

    proptest! {
        #[test]
        fn arbitrary_values_round_trip(
            seed in any::<u64>(),
            lr in 1e-9f64..10.0,
            beta in -1e6f64..1e6,
            scenes in proptest::collection::vec(any::<u64>(), 0..6),
            rays in 1usize..4096,
        ) {
            let c = RunConfig { seed, lr_optimizer: lr, beta, scenes, ray_batch: rays, ..RunConfig::default() };
            prop_assert_eq!(RunConfig::parse(&c.to_text(), "p").unwrap(), c);
        }
    }
}
