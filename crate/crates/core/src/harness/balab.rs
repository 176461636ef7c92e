//! Bundle-adjustment lab: three ways of refining poses against a renderer,
//! each logging the aligned pose error per iteration.
//!
//! * `Direct`: frozen renderer, a learnable `N x 6` pose embedding updated
//!   by Adam on `L_rgb` alone.
//! * `Dbarf`: the learned recurrent optimizer, every view as a target.
//! * `BarfPe`: a per-scene coordinate network with positional encoding and
//!   a coarse-to-fine frequency mask, trained jointly with the poses.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::train::{batch_pose_error, infer_poses, neighbors_for, write_text, Init, Model, SceneData};
use crate::autodiff::{Tape, Tensor, Var};
use crate::geometry::{Intrinsics, SE3Pose, TapePose};
use crate::losses::{loss_rgb, pose_error};
use crate::nn::{Adam, AdamConfig, Bound, Group, Linear, ParamId, ParamStore};
use crate::renderer::{sample_depths, volume_render, SourceView, RENDER_LEVEL};
use crate::synth::perturb_poses;
use crate::{Error, Result};

pub const TRAJECTORY_HEADER: &str = "mode,batch,step,rot_err_deg,trans_err";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Direct,
    Dbarf,
    BarfPe,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Direct => "direct",
            Mode::Dbarf => "dbarf",
            Mode::BarfPe => "barf-pe",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Mode::Direct),
            "dbarf" => Ok(Mode::Dbarf),
            "barf-pe" => Ok(Mode::BarfPe),
            other => Err(Error::Config(format!("unknown ba-lab mode `{other}` (direct, dbarf, barf-pe)"))),
        }
    }
}

/// One logged error. `batch` is the target view for `Dbarf` and 0 otherwise;
/// `step` is the recurrent iteration for `Dbarf`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabRow {
    pub batch: usize,
    pub step: u64,
    pub rot_err_deg: f64,
    pub trans_err: f64,
}

#[derive(Clone, Debug)]
pub struct LabReport {
    pub mode: Mode,
    pub rows: Vec<LabRow>,
}

impl LabReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRAJECTORY_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", self.mode.name(), r.batch, r.step, r.rot_err_deg, r.trans_err);
        }
        s
    }

    pub fn at_step(&self, step: u64) -> Option<&LabRow> {
        self.rows.iter().find(|r| r.step == step)
    }

    /// Rows of one batch in step order.
    pub fn batch(&self, b: usize) -> Vec<LabRow> {
        self.rows.iter().filter(|r| r.batch == b).copied().collect()
    }

    pub fn batches(&self) -> Vec<usize> {
        let mut b: Vec<usize> = self.rows.iter().map(|r| r.batch).collect();
        b.dedup();
        b
    }

    /// Fraction of batches whose rotation error never increases.
    pub fn monotone_fraction(&self) -> f64 {
        let batches = self.batches();
        if batches.is_empty() {
            return f64::NAN;
        }
        let ok = batches
            .iter()
            .filter(|&&b| self.batch(b).windows(2).all(|w| w[1].rot_err_deg <= w[0].rot_err_deg))
            .count();
        ok as f64 / batches.len() as f64
    }
}

/// Runs one mode and writes `trajectories.csv` under `out` when given.
pub fn run(cfg: &RunConfig, model: &mut Model, data: &SceneData, mode: Mode, out: Option<&Path>) -> Result<LabReport> {
    let report = match mode {
        Mode::Direct => direct(cfg, model, data)?,
        Mode::Dbarf => dbarf(cfg, model, data)?,
        Mode::BarfPe => barf_pe(cfg, data)?,
    };
    if let Some(dir) = out {
        super::train::ensure_dir(dir)?;
        write_text(&dir.join("trajectories.csv"), &report.to_csv())?;
    }
    Ok(report)
}

/// Aligned error of world poses of the training views.
fn world_error(cfg: &RunConfig, data: &SceneData, poses: &[SE3Pose]) -> (f64, f64) {
    let idx = cfg.train_views();
    let pred: Vec<SE3Pose> = idx.iter().map(|&i| poses[i]).collect();
    let truth: Vec<SE3Pose> = idx.iter().map(|&i| data.poses[i]).collect();
    match pose_error(&pred, &truth) {
        Ok(r) => (r.rot_err_deg, r.trans_err / data.diameter),
        Err(_) => (f64::NAN, f64::NAN),
    }
}

/// Ground truth with `ba_noise_deg` rotation noise and no translation noise.
fn noisy_start(cfg: &RunConfig, data: &SceneData) -> Vec<SE3Pose> {
    perturb_poses(&data.poses, cfg.ba_noise_deg, 0.0, cfg.seed ^ 0x6261)
}

/// Learnable twists `[n,6]` applied on the left of fixed base poses.
struct PoseEmbedding {
    store: ParamStore,
    id: ParamId,
    base: Vec<SE3Pose>,
}

impl PoseEmbedding {
    fn new(base: Vec<SE3Pose>) -> Self {
        let mut store = ParamStore::new();
        let id = store.add("pose.twists", Group::Optimizer, Tensor::zeros(&[base.len(), 6]));
        Self { store, id, base }
    }

    fn on_tape(&self, tape: &mut Tape, p: &Bound) -> Result<Vec<TapePose>> {
        let deltas = TapePose::exp_batch(tape, p.var(self.id))?;
        deltas
            .iter()
            .zip(&self.base)
            .map(|(d, b)| TapePose::constant(tape, b)?.premultiply(tape, d))
            .collect()
    }

    fn values(&self) -> Vec<SE3Pose> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, |_| false);
        self.on_tape(&mut tape, &p).map(|v| v.iter().map(|q| q.value(&tape)).collect()).unwrap_or_default()
    }
}

fn adam(lr: [f64; 3]) -> AdamConfig {
    AdamConfig { lr, clip: f64::INFINITY, ..AdamConfig::default() }
}

fn random_pixels(rng: &mut ChaCha8Rng, k: &Intrinsics, n: usize) -> Vec<[f64; 2]> {
    (0..n).map(|_| [rng.gen_range(0..k.width) as f64, rng.gen_range(0..k.height) as f64]).collect()
}

fn truth_colors(data: &SceneData, view: usize, pixels: &[[f64; 2]]) -> Result<Tensor> {
    let img = &data.views[view].image;
    Tensor::new(&[pixels.len(), 3], pixels.iter().flat_map(|q| img.get(q[0] as usize, q[1] as usize)).collect())
}

fn direct(cfg: &RunConfig, model: &Model, data: &SceneData) -> Result<LabReport> {
    // renderer-level features do not depend on poses: compute them once
    let features: Vec<Tensor> = {
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, |_| false);
        let mut out = Vec::with_capacity(data.views.len());
        for (j, v) in data.views.iter().enumerate() {
            let image = tape.constant(v.image.to_tensor());
            let pyr = model.renderer.fpn.extract(&mut tape, &p, image, j)?;
            out.push(tape.value(pyr.level(RENDER_LEVEL)).clone());
        }
        out
    };
    let mut emb = PoseEmbedding::new(noisy_start(cfg, data));
    let mut opt = Adam::new(adam([cfg.ba_lr; 3]), &emb.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6469_7265);
    let train = cfg.train_views();
    let mut rows = Vec::with_capacity(cfg.ba_steps as usize + 1);
    for step in 0..=cfg.ba_steps {
        let (r, t) = world_error(cfg, data, &emb.values());
        rows.push(LabRow { batch: 0, step, rot_err_deg: r, trans_err: t });
        if step == cfg.ba_steps {
            break;
        }
        let target = train[rng.gen_range(0..train.len())];
        let neighbors = neighbors_for(cfg, data, target, cfg.neighbors_pretrain)?;
        let mut tape = Tape::new();
        let frozen = model.store.bind(&mut tape, |_| false);
        let p = emb.store.bind(&mut tape, |_| true);
        let world = emb.on_tape(&mut tape, &p)?;
        let target_inv = world[target].inverse(&mut tape)?;
        let mut sources = Vec::with_capacity(neighbors.len());
        for &j in &neighbors {
            sources.push(SourceView {
                image: tape.constant(data.views[j].image.to_tensor()),
                features: tape.constant(features[j].clone()),
                k: data.k,
                p_ij: world[j].compose(&mut tape, &target_inv)?,
            });
        }
        let pixels = random_pixels(&mut rng, &data.k, cfg.ray_batch);
        let truth = tape.constant(truth_colors(data, target, &pixels)?);
        let out = model.renderer.render_rays(&mut tape, &frozen, &data.k, &sources, &pixels)?;
        let loss = loss_rgb(&mut tape, out.color, truth, &out.ray_valid)?;
        let grads = tape.backward(loss, None)?;
        match opt.step(&mut emb.store, &p.gradients(&grads)) {
            Ok(_) => {}
            // divergence is an outcome of this mode, not a failure
            Err(e) => {
                log::warn!("direct BA stopped at step {step}: {e}");
                break;
            }
        }
        if step % cfg.log_every == 0 {
            log::info!("direct step {step} rot {r:.3} trans {t:.4} l_rgb {:.4}", tape.value(loss).item());
        }
    }
    Ok(LabReport { mode: Mode::Direct, rows })
}

fn dbarf(cfg: &RunConfig, model: &mut Model, data: &SceneData) -> Result<LabReport> {
    let mut rows = Vec::new();
    for target in 0..data.views.len() {
        let neighbors = neighbors_for(cfg, data, target, cfg.neighbors_eval)?;
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(data.seed * 1009 + target as u64);
        let init = Init::Perturbed { rot_deg: cfg.init_rot_deg, trans_frac: cfg.init_trans_frac, seed };
        let run = infer_poses(model, data, target, &neighbors, init, seed)?;
        for (it, h) in run.history.iter().enumerate() {
            let (r, t) = batch_pose_error(data, target, &neighbors, &h.poses);
            rows.push(LabRow { batch: target, step: it as u64, rot_err_deg: r, trans_err: t });
        }
    }
    Ok(LabReport { mode: Mode::Dbarf, rows })
}

/// Coarse-to-fine weight of frequency `k` at progress `alpha` in `[0, L]`.
pub fn frequency_weight(alpha: f64, k: usize) -> f64 {
    let x = (alpha - k as f64).clamp(0.0, 1.0);
    (1.0 - (std::f64::consts::PI * x).cos()) / 2.0
}

/// Schedule progress: closed for the first 10% of steps, opening linearly
/// until 50%.
pub fn mask_alpha(step: u64, steps: u64, frequencies: usize) -> f64 {
    let s = if steps == 0 { 1.0 } else { step as f64 / steps as f64 };
    frequencies as f64 * ((s - 0.1) / 0.4).clamp(0.0, 1.0)
}

pub const PE_WIDTH: usize = 64;

/// Coordinate network `gamma(x) -> 64 -> 64 -> (sigma, rgb)`.
pub struct CoordinateNet {
    pub frequencies: usize,
    pub scale: f64,
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

impl CoordinateNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, frequencies: usize, scale: f64) -> Self {
        let input = 3 + 6 * frequencies;
        Self {
            frequencies,
            scale,
            l1: Linear::new(store, rng, "pe.l1", Group::Renderer, input, PE_WIDTH),
            l2: Linear::new(store, rng, "pe.l2", Group::Renderer, PE_WIDTH, PE_WIDTH),
            l3: Linear::new(store, rng, "pe.l3", Group::Renderer, PE_WIDTH, 4),
        }
    }

    /// `[x, w_k sin(2^k pi x), w_k cos(2^k pi x)]` on scaled `[n,3]` points.
    pub fn encode(&self, tape: &mut Tape, x: Var, alpha: f64) -> Result<Var> {
        let x = tape.scale(x, 1.0 / self.scale)?;
        let mut parts = vec![x];
        for k in 0..self.frequencies {
            let w = frequency_weight(alpha, k);
            let xk = tape.scale(x, (1u64 << k) as f64 * std::f64::consts::PI)?;
            for f in [Tape::sin, Tape::cos] {
                let v = f(tape, xk)?;
                parts.push(tape.scale(v, w)?);
            }
        }
        tape.concat(&parts, 1)
    }

    /// Density `[n,1]` and colour `[n,3]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, alpha: f64) -> Result<(Var, Var)> {
        let h = self.encode(tape, x, alpha)?;
        let h = self.l1.forward(tape, p, h)?;
        let h = tape.relu(h)?;
        let h = self.l2.forward(tape, p, h)?;
        let h = tape.relu(h)?;
        let o = self.l3.forward(tape, p, h)?;
        let sigma = tape.slice(o, 1, 0, 1)?;
        let sigma = tape.softplus(sigma)?;
        let rgb = tape.slice(o, 1, 1, 4)?;
        let rgb = tape.sigmoid(rgb)?;
        Ok((sigma, rgb))
    }
}

/// Renders `pixels` of a camera with world-to-camera pose `pose`. Returns
/// colours `[r,3]`.
pub fn render_coordinate(
    tape: &mut Tape,
    p: &Bound,
    net: &CoordinateNet,
    k: &Intrinsics,
    pose: &TapePose,
    pixels: &[[f64; 2]],
    depths: &[f64],
    alpha: f64,
) -> Result<Var> {
    let (r, s) = (pixels.len(), depths.len());
    let mut pts = Vec::with_capacity(3 * r * s);
    for px in pixels {
        let ray = k.ray(px[0], px[1]);
        for &z in depths {
            pts.extend_from_slice(&[ray.x * z, ray.y * z, z]);
        }
    }
    let cam = tape.constant(Tensor::new(&[r * s, 3], pts)?);
    let inv = pose.inverse(tape)?;
    let world = inv.transform(tape, cam)?;
    let (sigma, rgb) = net.forward(tape, p, world, alpha)?;
    let sigma = tape.reshape(sigma, &[r, s])?;
    let rgb = tape.reshape(rgb, &[r, s, 3])?;
    Ok(volume_render(tape, sigma, rgb, depths)?.0)
}

fn barf_pe(cfg: &RunConfig, data: &SceneData) -> Result<LabReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6261_7266);
    let mut store = ParamStore::new();
    let net = CoordinateNet::new(&mut store, &mut rng, cfg.ba_frequencies, cfg.far);
    let twists = store.add("pose.twists", Group::Optimizer, Tensor::zeros(&[data.views.len(), 6]));
    let base = noisy_start(cfg, data);
    let mut opt = Adam::new(adam([cfg.lr_features, cfg.lr_features, cfg.ba_lr]), &store);
    let depths = sample_depths(cfg.near, cfg.far, cfg.samples)?;
    let train = cfg.train_views();
    let poses_of = |tape: &mut Tape, p: &Bound| -> Result<Vec<TapePose>> {
        let deltas = TapePose::exp_batch(tape, p.var(twists))?;
        deltas.iter().zip(&base).map(|(d, b)| TapePose::constant(tape, b)?.premultiply(tape, d)).collect()
    };
    let mut rows = Vec::with_capacity(cfg.ba_steps as usize + 1);
    for step in 0..=cfg.ba_steps {
        let values = {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, |_| false);
            poses_of(&mut tape, &p)?.iter().map(|q| q.value(&tape)).collect::<Vec<_>>()
        };
        let (r, t) = world_error(cfg, data, &values);
        rows.push(LabRow { batch: 0, step, rot_err_deg: r, trans_err: t });
        if step == cfg.ba_steps {
            break;
        }
        let view = train[rng.gen_range(0..train.len())];
        let alpha = mask_alpha(step, cfg.ba_steps, cfg.ba_frequencies);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| true);
        let poses = poses_of(&mut tape, &p)?;
        let pixels = random_pixels(&mut rng, &data.k, cfg.ray_batch);
        let truth = tape.constant(truth_colors(data, view, &pixels)?);
        let color = render_coordinate(&mut tape, &p, &net, &data.k, &poses[view], &pixels, &depths, alpha)?;
        let loss = loss_rgb(&mut tape, color, truth, &vec![true; pixels.len()])?;
        let grads = tape.backward(loss, None)?;
        if let Err(e) = opt.step(&mut store, &p.gradients(&grads)) {
            log::warn!("barf-pe stopped at step {step}: {e}");
            break;
        }
        if step % cfg.log_every == 0 {
            log::info!("barf-pe step {step} alpha {alpha:.2} rot {r:.3} trans {t:.4} l_rgb {:.4}", tape.value(loss).item());
        }
    }
    Ok(LabReport { mode: Mode::BarfPe, rows })
}
