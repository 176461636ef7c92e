//! Joint training of the pose/depth optimizer and the renderer, evaluation
//! and rendering of held-out views.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use crate::autodiff::{Tape, Tensor, Var};
use crate::geometry::{relative_pose, warp_patch, Intrinsics, SE3Pose, TapePose};
use crate::imageio::{save_depth_png, Image};
use crate::losses::{
    blur_matrix, loss_depth_smooth, loss_final, loss_photo_warp, loss_rgb, pose_error, psnr, psnr_from_mse,
    schedule_weight, ssim, WarpedPatch,
};
use crate::nn::{Adam, AdamConfig, Bound, ParamStore};
use crate::optimizer::{
    init_state, init_state_from, patch_pixels, sample_patch_centers, trajectory_rows, OptState, OptimizeOutput,
    PoseDepthOptimizer, RunningNorm, TrajectoryRow,
};
use crate::renderer::{level_window, FeaturePyramid, GeneRf, SourceView, CHANNELS, STRIDES};
use crate::scene_graph::{build_scene_graph, DetectorConfig, MatchConfig, SceneGraph};
use crate::synth::{make_scene, perturb_poses, scene_diameter, GtView, SyntheticScene, TrajectoryStyle};
use crate::{Error, Result};

pub const METRICS_HEADER: &str = "step,psnr,ssim,l_rgb,l_depth,l_photo,w,rot_err_deg,trans_err";

/// One metrics line. `trans_err` is a fraction of the scene diameter;
/// `ssim` is only computed on full renders and is NaN on training rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub l_rgb: f64,
    pub l_depth: f64,
    pub l_photo: f64,
    pub w: f64,
    pub rot_err_deg: f64,
    pub trans_err: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.psnr, self.ssim, self.l_rgb, self.l_depth, self.l_photo, self.w, self.rot_err_deg, self.trans_err
        )
    }
}

pub fn format_metrics(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub fn parse_metrics(text: &str, source_name: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::parse(source_name, 1, format!("header must be `{METRICS_HEADER}`")));
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::parse(source_name, ln + 2, format!("expected 9 columns, got {}", f.len())));
        }
        let v = |i: usize| f[i].parse::<f64>().map_err(|e| Error::parse(source_name, ln + 2, e.to_string()));
        rows.push(MetricsRow {
            step: f[0].parse().map_err(|e: std::num::ParseIntError| Error::parse(source_name, ln + 2, e.to_string()))?,
            psnr: v(1)?,
            ssim: v(2)?,
            l_rgb: v(3)?,
            l_depth: v(4)?,
            l_photo: v(5)?,
            w: v(6)?,
            rot_err_deg: v(7)?,
            trans_err: v(8)?,
        });
    }
    Ok(rows)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// All learned weights plus the residual normaliser.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub renderer: GeneRf,
    pub optimizer: PoseDepthOptimizer,
    pub norm: RunningNorm,
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let renderer = GeneRf::new(&mut store, &mut rng, cfg.render_config());
        let ocfg = cfg.optimizer_config();
        let channels = CHANNELS[ocfg.level];
        let optimizer = PoseDepthOptimizer::new(&mut store, &mut rng, channels, ocfg);
        let norm = RunningNorm::new(channels, ocfg.norm_momentum);
        Self { store, renderer, optimizer, norm }
    }

    pub fn checkpoint(&self, cfg: &RunConfig, step: u64, metadata: &str) -> Checkpoint {
        Checkpoint::capture(&self.store, &self.norm, cfg.config_hash(), step, metadata)
    }

    pub fn from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.config_hash != cfg.config_hash() {
            return Err(Error::ConfigHashMismatch { expected: cfg.config_hash(), found: ckpt.config_hash });
        }
        let mut m = Self::new(cfg);
        m.norm = ckpt.restore(&mut m.store, cfg.optimizer_config().norm_momentum)?;
        Ok(m)
    }
}

/// A synthetic scene with its views and pose-free neighbour graph.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub seed: u64,
    pub scene: SyntheticScene,
    pub k: Intrinsics,
    pub poses: Vec<SE3Pose>,
    pub views: Vec<GtView>,
    pub graph: SceneGraph,
    pub diameter: f64,
}

pub fn load_scene(cfg: &RunConfig, seed: u64) -> Result<SceneData> {
    let scene = make_scene(seed, &cfg.scene_config(seed))?;
    let poses = scene.sample_trajectory(cfg.views, TrajectoryStyle::Arc)?;
    let k = Intrinsics::from_fov(cfg.image_size, cfg.image_size, cfg.fov_deg);
    let views = poses.iter().map(|p| scene.gt_render(p, &k)).collect::<Result<Vec<_>>>()?;
    let images: Vec<Image> = views.iter().map(|v| v.image.clone()).collect();
    let mcfg = MatchConfig { min_matches: cfg.min_matches, seed: cfg.seed, ..MatchConfig::default() };
    let (graph, _) = build_scene_graph(&images, &k, &DetectorConfig::default(), &mcfg)?;
    let diameter = scene_diameter(&poses);
    Ok(SceneData { seed, scene, k, poses, views, graph, diameter })
}

/// Up to `k` training-view neighbours of `target` by inlier count. When the
/// graph offers fewer, the nearest training views in capture order fill in.
pub fn neighbors_for(cfg: &RunConfig, data: &SceneData, target: usize, k: usize) -> Result<Vec<usize>> {
    let allowed = |j: usize| j != target && !cfg.is_heldout(j) && j < data.views.len();
    let mut out = data.graph.select_neighbors_where(target, k, allowed)?;
    if out.len() < k {
        let mut rest: Vec<usize> = (0..data.views.len()).filter(|&j| allowed(j) && !out.contains(&j)).collect();
        rest.sort_by_key(|&j| (j.abs_diff(target), j));
        let missing = k - out.len();
        if !rest.is_empty() {
            log::debug!("view {target}: graph gave {} of {k} neighbours, filling by capture order", out.len());
        }
        out.extend(rest.into_iter().take(missing));
    }
    if out.is_empty() {
        return Err(Error::Domain(format!("view {target} has no usable neighbour")));
    }
    Ok(out)
}

/// How the optimizer state for a batch starts.
#[derive(Clone, Debug)]
pub enum Init {
    /// Identity relative poses plus uniform twist noise.
    Identity,
    /// True poses perturbed in the world frame, then made relative.
    Perturbed { rot_deg: f64, trans_frac: f64, seed: u64 },
    /// Explicit relative poses.
    Given(Vec<SE3Pose>),
}

pub fn relative_truth(data: &SceneData, target: usize, neighbors: &[usize]) -> Vec<SE3Pose> {
    neighbors.iter().map(|&j| relative_pose(&data.poses[target], &data.poses[j])).collect()
}

pub fn perturbed_relative(data: &SceneData, target: usize, neighbors: &[usize], rot_deg: f64, trans_frac: f64, seed: u64) -> Vec<SE3Pose> {
    let mut world = vec![data.poses[target]];
    world.extend(neighbors.iter().map(|&j| data.poses[j]));
    // scale the translation bound by the full trajectory, not the batch
    let batch_d = scene_diameter(&world).max(1e-12);
    let noisy = perturb_poses(&world, rot_deg, trans_frac * data.diameter / batch_d, seed);
    noisy[1..].iter().map(|p| relative_pose(&noisy[0], p)).collect()
}

/// Aligned mean errors of a batch: target at identity plus relative poses.
/// Translation is a fraction of the scene diameter.
pub fn batch_pose_error(data: &SceneData, target: usize, neighbors: &[usize], relative: &[SE3Pose]) -> (f64, f64) {
    let mut pred = vec![SE3Pose::identity()];
    pred.extend_from_slice(relative);
    let mut truth = vec![data.poses[target]];
    truth.extend(neighbors.iter().map(|&j| data.poses[j]));
    match pose_error(&pred, &truth) {
        Ok(r) => (r.rot_err_deg, r.trans_err / data.diameter),
        Err(_) => (f64::NAN, f64::NAN),
    }
}

/// Tape-side inputs of one batch.
pub struct BatchGraph {
    pub target: usize,
    pub neighbors: Vec<usize>,
    /// Target first.
    pub images: Vec<Var>,
    pub pyramids: Vec<FeaturePyramid>,
    pub output: OptimizeOutput,
}

/// Extracts features and runs the recurrent optimizer on one batch.
#[allow(clippy::too_many_arguments)]
pub fn run_batch(
    tape: &mut Tape,
    p: &Bound,
    model: &mut Model,
    data: &SceneData,
    target: usize,
    neighbors: &[usize],
    init: Init,
    rng: &mut ChaCha8Rng,
    norm_update: bool,
) -> Result<BatchGraph> {
    let mut ids = vec![target];
    ids.extend_from_slice(neighbors);
    let images: Vec<Var> = ids.iter().map(|&v| tape.constant(data.views[v].image.to_tensor())).collect();
    let pyramids = ids
        .iter()
        .zip(&images)
        .map(|(&v, &img)| model.renderer.fpn.extract(tape, p, img, v))
        .collect::<Result<Vec<_>>>()?;
    let ocfg = model.optimizer.config;
    let l = ocfg.level;
    let (w, h) = (data.k.width, data.k.height);
    let window = level_window(w, h, l)
        .ok_or_else(|| Error::Domain(format!("{w}x{h} image has no padding-free texels at level {l}")))?;
    let kl = data.k.downscaled(STRIDES[l]);
    let centers = sample_patch_centers(rng, kl.width, kl.height, &ocfg)?;
    let state = match init {
        Init::Identity => init_state(tape, neighbors.len(), centers, &ocfg, rng)?,
        Init::Perturbed { rot_deg, trans_frac, seed } => {
            let rel = perturbed_relative(data, target, neighbors, rot_deg, trans_frac, seed);
            init_state_from(tape, &rel, centers, &ocfg)?
        }
        Init::Given(rel) => init_state_from(tape, &rel, centers, &ocfg)?,
    };
    let f_i = pyramids[0].level(l);
    let f_js: Vec<Var> = pyramids[1..].iter().map(|py| py.level(l)).collect();
    let output = model.optimizer.optimize(tape, p, f_i, &f_js, &kl, window, state, &mut model.norm, norm_update)?;
    Ok(BatchGraph { target, neighbors: neighbors.to_vec(), images, pyramids, output })
}

/// Warped photometric and edge-aware depth losses on the optimizer's patches,
/// averaged over patches. Texel `x` of the cost level sits on image pixel
/// `stride * x`, so patch colours are read without interpolation.
pub fn geometric_losses(tape: &mut Tape, data: &SceneData, batch: &BatchGraph, state: &OptState, cfg: &RunConfig) -> Result<(Var, Var)> {
    let ocfg = cfg.optimizer_config();
    let l = ocfg.level;
    let s = STRIDES[l];
    let kl = data.k.downscaled(s);
    let pp = ocfg.pixels_per_patch();
    let pixels = patch_pixels(&state.centers, ocfg.patch);
    let blur = blur_matrix(ocfg.patch, ocfg.patch);
    let img = &data.views[batch.target].image;
    let (mut photo, mut depth) = (Vec::new(), Vec::new());
    for pch in 0..state.centers.len() {
        let px = &pixels[pch * pp..(pch + 1) * pp];
        let inv = tape.slice(state.inv_depth, 0, pch * pp, (pch + 1) * pp)?;
        let colors: Vec<f64> = px.iter().flat_map(|q| img.get(q[0] as usize * s, q[1] as usize * s)).collect();
        let colors = Tensor::new(&[pp, 3], colors)?;
        let tc = tape.constant(colors.clone());
        let mut warped = Vec::new();
        for (j, pose) in state.poses.iter().enumerate() {
            match warp_patch(tape, px, inv, &kl, &data.k, pose, batch.images[j + 1]) {
                Ok(w) => warped.push(WarpedPatch { colors: w.features, mask: w.mask }),
                Err(Error::EmptyWarp) => {}
                Err(e) => return Err(e),
            }
        }
        if !warped.is_empty() {
            photo.push(loss_photo_warp(tape, tc, &warped, &blur, cfg.alpha)?);
        }
        let d2 = tape.reshape(inv, &[ocfg.patch, ocfg.patch])?;
        depth.push(loss_depth_smooth(tape, d2, &colors.reshape(&[ocfg.patch, ocfg.patch, 3])?, &vec![true; pp])?);
    }
    let mean = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
        if v.is_empty() {
            log::warn!("view {}: no patch warped into any neighbour", batch.target);
            return Ok(tape.scalar(0.0));
        }
        let mut acc = v[0];
        for &x in &v[1..] {
            acc = tape.add(acc, x)?;
        }
        tape.scale(acc, 1.0 / v.len() as f64)
    };
    Ok((mean(tape, &photo)?, mean(tape, &depth)?))
}

/// Source views for rendering the batch target with the given relative poses.
pub fn sources(batch: &BatchGraph, k: &Intrinsics, poses: &[TapePose]) -> Vec<SourceView> {
    poses
        .iter()
        .enumerate()
        .map(|(j, pose)| SourceView {
            image: batch.images[j + 1],
            features: batch.pyramids[j + 1].level(crate::renderer::RENDER_LEVEL),
            k: *k,
            p_ij: pose.clone(),
        })
        .collect()
}

/// Renders `rays` random target pixels; returns `L_rgb` and the squared
/// error sum over valid rays with their count.
pub fn render_loss(
    tape: &mut Tape,
    p: &Bound,
    model: &Model,
    data: &SceneData,
    batch: &BatchGraph,
    poses: &[TapePose],
    rays: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, f64, usize)> {
    let (w, h) = (data.k.width, data.k.height);
    let pixels: Vec<[f64; 2]> =
        (0..rays).map(|_| [rng.gen_range(0..w) as f64, rng.gen_range(0..h) as f64]).collect();
    let img = &data.views[batch.target].image;
    let truth: Vec<f64> = pixels.iter().flat_map(|q| img.get(q[0] as usize, q[1] as usize)).collect();
    let truth_t = Tensor::new(&[rays, 3], truth)?;
    let truth = tape.constant(truth_t.clone());
    let src = sources(batch, &data.k, poses);
    let out = model.renderer.render_rays(tape, p, &data.k, &src, &pixels)?;
    let l = loss_rgb(tape, out.color, truth, &out.ray_valid)?;
    let c = tape.value(out.color).data();
    let (mut se, mut n) = (0.0, 0usize);
    for (i, &valid) in out.ray_valid.iter().enumerate() {
        if valid {
            n += 1;
            for ch in 0..3 {
                se += (c[3 * i + ch] - truth_t.data()[3 * i + ch]).powi(2);
            }
        }
    }
    Ok((l, se, n))
}

/// Outcome of one optimisation step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub metrics: MetricsRow,
    pub target: usize,
    pub neighbors: Vec<usize>,
    pub grad_norm: [f64; 3],
    pub update_norm: [f64; 3],
}

/// One joint step on a random training target of `data`.
pub fn train_step(model: &mut Model, adam: &mut Adam, cfg: &RunConfig, data: &SceneData, step: u64, rng: &mut ChaCha8Rng) -> Result<StepOutcome> {
    let train = cfg.train_views();
    let target = train[rng.gen_range(0..train.len())];
    let neighbors = neighbors_for(cfg, data, target, cfg.neighbors_pretrain)?;
    let init = if rng.gen::<f64>() < cfg.mixed_init {
        Init::Perturbed { rot_deg: cfg.init_rot_deg, trans_frac: cfg.init_trans_frac, seed: rng.gen() }
    } else {
        Init::Identity
    };
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, |_| true);
    let batch = run_batch(&mut tape, &p, model, data, target, &neighbors, init, rng, true)?;
    let state = batch.output.state.clone();
    let (l_photo, l_depth) = geometric_losses(&mut tape, data, &batch, &state, cfg)?;
    let (l_rgb, se, n) = render_loss(&mut tape, &p, model, data, &batch, &state.poses, cfg.ray_batch, rng)?;
    let (lf, report) = loss_final(&mut tape, l_rgb, l_depth, l_photo, step, cfg.beta)?;
    if !report.l_final.is_finite() {
        return Err(Error::Diverged { iteration: step as usize, detail: format!("non-finite loss {report:?}") });
    }
    let grads = tape.backward(lf, None)?;
    let g = p.gradients(&grads);
    let stats = adam.step(&mut model.store, &g)?;
    let (rot, tr) = batch_pose_error(data, target, &neighbors, &state.pose_values(&tape));
    let metrics = MetricsRow {
        step,
        psnr: if n > 0 { psnr_from_mse(se / (3 * n) as f64) } else { f64::NAN },
        ssim: f64::NAN,
        l_rgb: report.l_rgb,
        l_depth: report.l_depth,
        l_photo: report.l_photo,
        w: report.w,
        rot_err_deg: rot,
        trans_err: tr,
    };
    Ok(StepOutcome { metrics, target, neighbors, grad_norm: stats.grad_norm, update_norm: stats.update_norm })
}

/// Views each training batch touched, per scene.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitAudit {
    pub used: BTreeSet<(u64, usize)>,
    pub heldout: BTreeSet<(u64, usize)>,
}

impl SplitAudit {
    pub fn record(&mut self, cfg: &RunConfig, scene: u64, views: impl IntoIterator<Item = usize>) {
        for v in views {
            self.used.insert((scene, v));
        }
        for v in cfg.heldout_views() {
            self.heldout.insert((scene, v));
        }
    }

    pub fn violations(&self) -> Vec<(u64, usize)> {
        self.used.intersection(&self.heldout).copied().collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# scene view (views used by training batches)");
        for (sc, v) in &self.used {
            let _ = writeln!(s, "used {sc} {v}");
        }
        for (sc, v) in &self.heldout {
            let _ = writeln!(s, "heldout {sc} {v}");
        }
        let _ = writeln!(s, "violations {}", self.violations().len());
        s
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: Model,
    pub rows: Vec<MetricsRow>,
    pub step: u64,
    pub audit: SplitAudit,
}

/// Shared loop of pretraining and fine-tuning. Writes `metrics.csv`,
/// `split_audit.txt` and `checkpoint.dbrf` under `out`. On a failed step the
/// last good state goes to `checkpoint_last_good.dbrf` and the error is
/// returned.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    cfg: &RunConfig,
    mut model: Model,
    scenes: &[SceneData],
    adam_cfg: AdamConfig,
    start_step: u64,
    iters: u64,
    metadata: &str,
    out: &Path,
) -> Result<TrainReport> {
    ensure_dir(out)?;
    if scenes.is_empty() {
        return Err(Error::Config("no training scenes".into()));
    }
    let mut adam = Adam::new(adam_cfg, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e ^ start_step);
    let mut rows = Vec::new();
    let mut audit = SplitAudit::default();
    for s in scenes {
        audit.record(cfg, s.seed, std::iter::empty());
    }
    let ckpt_path = out.join("checkpoint.dbrf");
    let metrics_path = out.join("metrics.csv");
    for i in 0..iters {
        let step = start_step + i;
        let data = &scenes[(i as usize) % scenes.len()];
        let outcome = match train_step(&mut model, &mut adam, cfg, data, step, &mut rng) {
            Ok(o) => o,
            Err(e) => {
                let meta = format!("{metadata}halted_at={step}\n");
                model.checkpoint(cfg, step, &meta).save(&out.join("checkpoint_last_good.dbrf"))?;
                write_text(&metrics_path, &format_metrics(&rows))?;
                log::error!("training halted at step {step} (scene {}): {e}", data.seed);
                return Err(e);
            }
        };
        audit.record(cfg, data.seed, std::iter::once(outcome.target).chain(outcome.neighbors.iter().copied()));
        if i % cfg.log_every == 0 || i + 1 == iters {
            let m = outcome.metrics;
            log::info!(
                "step {step} psnr {:.2} l_rgb {:.4} l_photo {:.4} w {:.3} rot {:.3} trans {:.4}",
                m.psnr,
                m.l_rgb,
                m.l_photo,
                m.w,
                m.rot_err_deg,
                m.trans_err
            );
            rows.push(m);
        }
        if (i + 1) % cfg.checkpoint_every == 0 {
            model.checkpoint(cfg, step + 1, metadata).save(&ckpt_path)?;
            write_text(&metrics_path, &format_metrics(&rows))?;
        }
    }
    let violations = audit.violations();
    if !violations.is_empty() {
        return Err(Error::State(format!("held-out views used in training: {violations:?}")));
    }
    let step = start_step + iters;
    model.checkpoint(cfg, step, metadata).save(&ckpt_path)?;
    write_text(&metrics_path, &format_metrics(&rows))?;
    write_text(&out.join("split_audit.txt"), &audit.to_text())?;
    Ok(TrainReport { model, rows, step, audit })
}

/// Pretraining across `cfg.scenes` with the pretraining rates.
pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<TrainReport> {
    let scenes = cfg.scenes.iter().map(|&s| load_scene(cfg, s)).collect::<Result<Vec<_>>>()?;
    let meta = format!("stage=pretrain\nscenes={:?}\n", cfg.scenes);
    train_loop(cfg, Model::new(cfg), &scenes, cfg.pretrain_adam(), 0, cfg.pretrain_iters, &meta, out)
}

/// Fine-tuning on one scene's training views, continuing the step count
/// (and therefore the loss schedule) of the checkpoint.
pub fn finetune(cfg: &RunConfig, ckpt: &Checkpoint, scene: &SceneData, out: &Path) -> Result<TrainReport> {
    let model = Model::from_checkpoint(cfg, ckpt)?;
    let meta = format!("{}stage=finetune\nfinetune_scene={}\nfinetune_iters={}\n", ckpt.metadata, scene.seed, cfg.finetune_iters);
    train_loop(cfg, model, std::slice::from_ref(scene), cfg.finetune_adam(), ckpt.step, cfg.finetune_iters, &meta, out)
}

/// Optimizer result for a batch without any training, relative poses per iteration.
pub fn infer_poses(model: &mut Model, data: &SceneData, target: usize, neighbors: &[usize], init: Init, seed: u64) -> Result<OptimizeOutput> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, |_| false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(run_batch(&mut tape, &p, model, data, target, neighbors, init, &mut rng, false)?.output)
}

/// Full-image render of `target` from `neighbors` at fixed relative poses.
/// Returns the image and the expected depth per pixel.
pub fn render_view(model: &Model, data: &SceneData, neighbors: &[usize], relative: &[SE3Pose], chunk: usize) -> Result<(Image, Vec<f64>)> {
    let (w, h) = (data.k.width, data.k.height);
    let all: Vec<[f64; 2]> = (0..h).flat_map(|y| (0..w).map(move |x| [x as f64, y as f64])).collect();
    let mut img = Image::new(w, h);
    let mut depth = vec![f64::NAN; w * h];
    for (ci, px) in all.chunks(chunk.max(1)).enumerate() {
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, |_| false);
        let mut srcs = Vec::with_capacity(neighbors.len());
        for (&j, rel) in neighbors.iter().zip(relative) {
            let image = tape.constant(data.views[j].image.to_tensor());
            let pyr = model.renderer.fpn.extract(&mut tape, &p, image, j)?;
            let p_ij = TapePose::constant(&mut tape, rel)?;
            srcs.push(SourceView { image, features: pyr.level(crate::renderer::RENDER_LEVEL), k: data.k, p_ij });
        }
        let out = model.renderer.render_rays(&mut tape, &p, &data.k, &srcs, px)?;
        let c = tape.value(out.color).data();
        let d = tape.value(out.depth).data();
        for i in 0..px.len() {
            let idx = ci * chunk + i;
            let (x, y) = (idx % w, idx / w);
            img.set(x, y, [c[3 * i], c[3 * i + 1], c[3 * i + 2]]);
            if out.ray_valid[i] {
                depth[idx] = d[i];
            }
        }
    }
    Ok((img, depth))
}

/// Evaluation output.
#[derive(Clone, Debug)]
pub struct EvalReport {
    /// One row per held-out view, in view order.
    pub rows: Vec<MetricsRow>,
    /// Aligned pose errors of every batch (each view as target).
    pub batch_rot_deg: Vec<f64>,
    /// Fractions of the scene diameter.
    pub batch_trans: Vec<f64>,
    /// Same errors at the initialisation.
    pub init_rot_deg: Vec<f64>,
    pub init_trans: Vec<f64>,
    pub trajectories: Vec<TrajectoryRow>,
    pub rendered: Vec<usize>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr))
    }
    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }
    pub fn mean_rot_deg(&self) -> f64 {
        mean(self.batch_rot_deg.iter().copied())
    }
    pub fn mean_trans(&self) -> f64 {
        mean(self.batch_trans.iter().copied())
    }
}

pub fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Pose errors for every view as target (perturbed initialisation), then
/// renders of the held-out views with the optimized poses. With `out` set,
/// writes `images/`, `depths/`, `metrics.csv` and `trajectories.csv`.
pub fn evaluate(cfg: &RunConfig, model: &mut Model, data: &SceneData, step: u64, out: Option<&Path>) -> Result<EvalReport> {
    let mut report = EvalReport {
        rows: Vec::new(),
        batch_rot_deg: Vec::new(),
        batch_trans: Vec::new(),
        init_rot_deg: Vec::new(),
        init_trans: Vec::new(),
        trajectories: Vec::new(),
        rendered: Vec::new(),
    };
    if let Some(dir) = out {
        ensure_dir(&dir.join("images"))?;
        ensure_dir(&dir.join("depths"))?;
    }
    for target in 0..data.views.len() {
        let neighbors = neighbors_for(cfg, data, target, cfg.neighbors_eval)?;
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(data.seed * 1009 + target as u64);
        let init = Init::Perturbed { rot_deg: cfg.init_rot_deg, trans_frac: cfg.init_trans_frac, seed };
        let run = infer_poses(model, data, target, &neighbors, init, seed)?;
        let first = &run.history[0].poses;
        let last = &run.history.last().expect("history").poses;
        let (r0, t0) = batch_pose_error(data, target, &neighbors, first);
        let (r1, t1) = batch_pose_error(data, target, &neighbors, last);
        report.init_rot_deg.push(r0);
        report.init_trans.push(t0);
        report.batch_rot_deg.push(r1);
        report.batch_trans.push(t1);
        let gt_n: Vec<SE3Pose> = neighbors.iter().map(|&j| data.poses[j]).collect();
        if let Ok(rows) = trajectory_rows(target, &neighbors, &run.history, &data.poses[target], &gt_n) {
            report.trajectories.extend(rows);
        }
        if !cfg.is_heldout(target) {
            continue;
        }
        let (img, depth) = render_view(model, data, &neighbors, last, 2048)?;
        let gt = &data.views[target].image;
        let l_rgb = img
            .data
            .chunks_exact(3)
            .zip(gt.data.chunks_exact(3))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / (img.width * img.height) as f64;
        let (l_photo, l_depth) = {
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape, |_| false);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = run_batch(&mut tape, &p, model, data, target, &neighbors, Init::Given(last.clone()), &mut rng, false)?;
            let (lp, ld) = geometric_losses(&mut tape, data, &batch, &batch.output.state, cfg)?;
            (tape.value(lp).item(), tape.value(ld).item())
        };
        report.rows.push(MetricsRow {
            step,
            psnr: psnr(&img, gt)?,
            ssim: ssim(&img, gt)?,
            l_rgb,
            l_depth,
            l_photo,
            w: schedule_weight(cfg.beta, step),
            rot_err_deg: r1,
            trans_err: t1,
        });
        report.rendered.push(target);
        if let Some(dir) = out {
            img.save_png(&dir.join("images").join(format!("view_{target:03}.png")))?;
            gt.save_png(&dir.join("images").join(format!("view_{target:03}_gt.png")))?;
            save_depth_png(&dir.join("depths").join(format!("view_{target:03}.png")), img.width, img.height, &depth, 1000.0)?;
        }
    }
    if let Some(dir) = out {
        write_text(&dir.join("metrics.csv"), &format_metrics(&report.rows))?;
        crate::optimizer::write_trajectory_csv(&dir.join("trajectories.csv"), &report.trajectories)?;
    }
    Ok(report)
}

/// Parameter groups whose values differ between two stores.
pub fn changed_groups(a: &ParamStore, b: &ParamStore) -> [bool; 3] {
    let mut out = [false; 3];
    for (p, q) in a.params().iter().zip(b.params()) {
        if p.value != q.value {
            out[p.group.index()] = true;
        }
    }
    out
}
