//! Recurrent pose/depth optimizer: a feature-metric cost map over patches
//! of the target view drives a GRU whose heads emit per-neighbour twist
//! corrections and per-pixel inverse-depth increments.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{Matrix6, Vector2, Vector3, Vector6};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{project_jacobian, warp_patch_windowed, Intrinsics, SE3Pose, TapePose, Twist};
use crate::losses::pose_error;
use crate::nn::{Bound, Conv, Group, Gru, Linear, ParamStore};

/// Robust penalty applied to the cost-map objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Robust {
    Identity,
    Charbonnier(f64),
}

impl Robust {
    pub fn apply(&self, r: f64) -> f64 {
        match *self {
            Robust::Identity => r.abs(),
            Robust::Charbonnier(e) => (r * r + e * e).sqrt() - e,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    /// Patch side in level texels.
    pub patch: usize,
    pub patches: usize,
    /// Pyramid level the cost map is built on.
    pub level: usize,
    pub hidden: usize,
    pub enc_width: usize,
    pub t_max: usize,
    /// Half-width of the uniform twist perturbation at initialisation.
    pub eps: f64,
    pub twist_cap: f64,
    pub depth_cap: f64,
    pub near: f64,
    pub far: f64,
    pub robust: Robust,
    pub norm_momentum: f64,
    /// Feed damped Gauss-Newton steps (computed outside the tape) to the
    /// recurrent block and heads.
    pub gn_features: bool,
    pub lm_damping: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            patches: 8,
            level: 1,
            hidden: 32,
            enc_width: 24,
            t_max: 4,
            eps: 0.05,
            twist_cap: 0.2,
            depth_cap: 0.15,
            near: 2.0,
            far: 12.0,
            robust: Robust::Identity,
            norm_momentum: 0.99,
            gn_features: true,
            lm_damping: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn mid_inv_depth(&self) -> f64 {
        0.5 * (1.0 / self.near + 1.0 / self.far)
    }

    pub fn pixels_per_patch(&self) -> usize {
        self.patch * self.patch
    }
}

/// Recurrent optimizer state for one target view. Inverse depth lives on
/// the patch pixels (`[patches * patch^2, 1]`, patch-major, row-major
/// inside a patch).
#[derive(Clone, Debug)]
pub struct OptState {
    pub poses: Vec<TapePose>,
    pub inv_depth: Var,
    pub hidden: Var,
    pub iteration: usize,
    /// Patch centres in level texels.
    pub centers: Vec<[usize; 2]>,
}

impl OptState {
    pub fn pose_values(&self, tape: &Tape) -> Vec<SE3Pose> {
        self.poses.iter().map(|p| p.value(tape)).collect()
    }

    pub fn depth_values(&self, tape: &Tape) -> Vec<f64> {
        tape.value(self.inv_depth).data().to_vec()
    }
}

/// Level-texel coordinates of every patch pixel, patch-major.
pub fn patch_pixels(centers: &[[usize; 2]], patch: usize) -> Vec<[f64; 2]> {
    let half = patch / 2;
    let mut out = Vec::with_capacity(centers.len() * patch * patch);
    for c in centers {
        for y in 0..patch {
            for x in 0..patch {
                out.push([(c[0] + x - half) as f64, (c[1] + y - half) as f64]);
            }
        }
    }
    out
}

/// Random patch centres at least half a patch from the map border.
pub fn sample_patch_centers(rng: &mut ChaCha8Rng, width: usize, height: usize, cfg: &OptimizerConfig) -> Result<Vec<[usize; 2]>> {
    let half = cfg.patch / 2;
    if width < cfg.patch || height < cfg.patch {
        return Err(Error::Domain(format!("{width}x{height} map smaller than a {} patch", cfg.patch)));
    }
    Ok((0..cfg.patches)
        .map(|_| [rng.gen_range(half..=width - cfg.patch + half), rng.gen_range(half..=height - cfg.patch + half)])
        .collect())
}

fn check_centers(centers: &[[usize; 2]], width: usize, height: usize, patch: usize) -> Result<()> {
    let half = patch / 2;
    for (i, c) in centers.iter().enumerate() {
        if c[0] < half || c[1] < half || c[0] + patch - half > width || c[1] + patch - half > height {
            return Err(Error::Domain(format!("patch centre {i} at {c:?} closer than half a patch to the border")));
        }
    }
    Ok(())
}

/// Identity relative poses perturbed by uniform twists in `[-eps, eps]`,
/// constant mid-range inverse depth, zero hidden state.
pub fn init_state(tape: &mut Tape, neighbors: usize, centers: Vec<[usize; 2]>, cfg: &OptimizerConfig, rng: &mut ChaCha8Rng) -> Result<OptState> {
    let poses: Vec<SE3Pose> = (0..neighbors).map(|_| SE3Pose::exp(&Twist::uniform(rng, cfg.eps))).collect();
    init_state_from(tape, &poses, centers, cfg)
}

/// State starting from given relative poses.
pub fn init_state_from(tape: &mut Tape, poses: &[SE3Pose], centers: Vec<[usize; 2]>, cfg: &OptimizerConfig) -> Result<OptState> {
    if poses.is_empty() {
        return Err(Error::Domain("init_state: no neighbours".into()));
    }
    let n = centers.len() * cfg.pixels_per_patch();
    let poses = poses.iter().map(|p| TapePose::constant(tape, p)).collect::<Result<Vec<_>>>()?;
    let inv_depth = tape.constant(Tensor::full(&[n, 1], cfg.mid_inv_depth()));
    let hidden = tape.constant(Tensor::zeros(&[poses.len(), cfg.hidden]));
    Ok(OptState { poses, inv_depth, hidden, iteration: 0, centers })
}

/// Exponential moving per-channel statistics of cost residuals.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningNorm {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub updates: u64,
}

impl RunningNorm {
    pub fn new(channels: usize, momentum: f64) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels], momentum, updates: 0 }
    }

    /// Folds in the masked rows of `values` (`[n, c]`).
    pub fn update(&mut self, values: &Tensor, mask: &[f64]) {
        let c = self.mean.len();
        let count: f64 = mask.iter().sum();
        if count == 0.0 {
            return;
        }
        let d = values.data();
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for (i, &m) in mask.iter().enumerate() {
            if m > 0.0 {
                for k in 0..c {
                    mean[k] += d[i * c + k];
                    sq[k] += d[i * c + k] * d[i * c + k];
                }
            }
        }
        let a = if self.updates == 0 { 0.0 } else { self.momentum };
        for k in 0..c {
            let m = mean[k] / count;
            let v = (sq[k] / count - m * m).max(0.0);
            self.mean[k] = a * self.mean[k] + (1.0 - a) * m;
            self.var[k] = a * self.var[k] + (1.0 - a) * v;
        }
        self.updates += 1;
    }

    pub fn normalize(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let c = self.mean.len();
        let m = tape.constant(Tensor::new(&[c], self.mean.clone())?);
        let s = tape.constant(Tensor::new(&[c], self.var.iter().map(|v| 1.0 / (v + 1e-8).sqrt()).collect())?);
        let y = tape.sub(x, m)?;
        tape.mul(y, s)
    }

    pub fn to_tensors(&self) -> (Tensor, Tensor, u64) {
        let c = self.mean.len();
        (Tensor::from_parts(vec![c], self.mean.clone()), Tensor::from_parts(vec![c], self.var.clone()), self.updates)
    }
}

/// Feature-metric residuals of the current state.
#[derive(Clone, Debug)]
pub struct CostMap {
    /// Per neighbour `[n, c]`, zero where masked.
    pub residuals: Vec<Var>,
    pub masks: Vec<Vec<f64>>,
    /// Mean over valid neighbours `[n, c]`.
    pub mean_residual: Var,
    /// 1 where at least one neighbour is valid.
    pub pixel_valid: Vec<f64>,
    pub target_features: Var,
    pub valid_fraction: Vec<f64>,
    /// `[neighbour][patch]` flags of patches with any valid pixel.
    pub patch_valid: Vec<Vec<bool>>,
    /// Damped Gauss-Newton twist per neighbour.
    pub lm_steps: Vec<[f64; 6]>,
    /// Damped Gauss-Newton inverse-depth step per pixel.
    pub depth_steps: Vec<f64>,
}

impl CostMap {
    /// Mean absolute entry of the pooled residual over valid pixels.
    pub fn mean_magnitude(&self, tape: &Tape) -> f64 {
        let r = tape.value(self.mean_residual);
        let c = r.shape()[1];
        let count: f64 = self.pixel_valid.iter().sum();
        if count == 0.0 {
            return 0.0;
        }
        let mut s = 0.0;
        for (i, &m) in self.pixel_valid.iter().enumerate() {
            if m > 0.0 {
                s += r.data()[i * c..(i + 1) * c].iter().map(|v| v.abs()).sum::<f64>();
            }
        }
        s / (count * c as f64)
    }

    /// Robust objective of one neighbour's residual, mean over valid entries.
    pub fn neighbor_cost(&self, tape: &Tape, j: usize, robust: Robust) -> f64 {
        let r = tape.value(self.residuals[j]);
        let c = r.shape()[1];
        let count: f64 = self.masks[j].iter().sum();
        if count == 0.0 {
            return 0.0;
        }
        let mut s = 0.0;
        for (i, &m) in self.masks[j].iter().enumerate() {
            if m > 0.0 {
                s += r.data()[i * c..(i + 1) * c].iter().map(|v| robust.apply(*v)).sum::<f64>();
            }
        }
        s / (count * c as f64)
    }
}

fn feature_gradient(map: &Tensor, x: f64, y: f64) -> Option<Vec<[f64; 2]>> {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(w - 2);
    let y0 = (y.floor() as usize).min(h - 2);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let d = map.data();
    let at = |yy: usize, xx: usize, k: usize| d[(yy * w + xx) * c + k];
    Some(
        (0..c)
            .map(|k| {
                let gx = (1.0 - fy) * (at(y0, x0 + 1, k) - at(y0, x0, k)) + fy * (at(y0 + 1, x0 + 1, k) - at(y0 + 1, x0, k));
                let gy = (1.0 - fx) * (at(y0 + 1, x0, k) - at(y0, x0, k)) + fx * (at(y0 + 1, x0 + 1, k) - at(y0, x0 + 1, k));
                [gx, gy]
            })
            .collect(),
    )
}

/// Builds the cost map at the state's patches. `f_i` and `f_js` are
/// `[h, w, c]` maps of the cost level with intrinsics `k`; `window` is the
/// padding-free texel range used on both sides of the warp.
#[allow(clippy::too_many_arguments)]
pub fn build_cost_map(
    tape: &mut Tape,
    f_i: Var,
    f_js: &[Var],
    k: &Intrinsics,
    state: &OptState,
    cfg: &OptimizerConfig,
    window: [usize; 4],
) -> Result<CostMap> {
    if f_js.len() != state.poses.len() {
        return Err(Error::Shape(format!("{} neighbour maps for {} poses", f_js.len(), state.poses.len())));
    }
    let s = tape.shape(f_i).to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    check_centers(&state.centers, w, h, cfg.patch)?;
    let pixels = patch_pixels(&state.centers, cfg.patch);
    let n = pixels.len();
    let ppp = cfg.pixels_per_patch();
    let win = [window[0] as f64, window[1] as f64, window[2] as f64, window[3] as f64];
    let inside: Vec<f64> = pixels
        .iter()
        .map(|p| if p[0] >= win[0] && p[0] <= win[1] && p[1] >= win[2] && p[1] <= win[3] { 1.0 } else { 0.0 })
        .collect();
    let flat = tape.reshape(f_i, &[h * w, c])?;
    let rows: Vec<usize> = pixels.iter().map(|p| p[1] as usize * w + p[0] as usize).collect();
    let target = tape.gather_rows(flat, &rows)?;
    let inv = tape.value(state.inv_depth).data().to_vec();
    let mut residuals = Vec::with_capacity(f_js.len());
    let mut masks = Vec::with_capacity(f_js.len());
    let mut lm_steps = Vec::with_capacity(f_js.len());
    let mut num = vec![0.0; n];
    let mut den = vec![0.0; n];
    for (j, (&f_j, pose)) in f_js.iter().zip(&state.poses).enumerate() {
        let warp = match warp_patch_windowed(tape, &pixels, state.inv_depth, k, k, pose, f_j, Some(win)) {
            Ok(wp) => Some(wp),
            Err(Error::EmptyWarp) => None,
            Err(e) => return Err(e),
        };
        let Some(wp) = warp else {
            log::warn!("cost map: neighbour {j} has no valid warp");
            residuals.push(tape.constant(Tensor::zeros(&[n, c])));
            masks.push(vec![0.0; n]);
            lm_steps.push([0.0; 6]);
            continue;
        };
        let mask: Vec<f64> = wp.mask.iter().zip(&inside).map(|(a, b)| a * b).collect();
        let mv = tape.constant(Tensor::new(&[n, 1], mask.clone())?);
        let d = tape.sub(wp.features, target)?;
        let r = tape.mul(d, mv)?;
        if cfg.gn_features {
            let fmap = tape.value(f_j).clone();
            let uv = tape.value(wp.coords).data().to_vec();
            let pts = tape.value(wp.points).data().to_vec();
            let rv = tape.value(r).data().to_vec();
            let pv = pose.value(tape);
            let mut hm = Matrix6::<f64>::zeros();
            let mut g = Vector6::<f64>::zeros();
            for i in 0..n {
                if mask[i] == 0.0 {
                    continue;
                }
                let Some(grad) = feature_gradient(&fmap, uv[2 * i], uv[2 * i + 1]) else { continue };
                let xj = Vector3::new(pts[3 * i], pts[3 * i + 1], pts[3 * i + 2]);
                let jp = project_jacobian(k, &xj);
                // d uv / d rho through X_i = ray / rho
                let ray = k.ray(pixels[i][0], pixels[i][1]);
                let dx = pv.rotation * (-ray / (inv[i] * inv[i]));
                let (iz, z2) = (1.0 / xj.z, xj.z * xj.z);
                let duv = Vector2::new(
                    k.fx * (dx.x * iz - xj.x * dx.z / z2),
                    k.fy * (dx.y * iz - xj.y * dx.z / z2),
                );
                for (ch, gr) in grad.iter().enumerate() {
                    let row = jp.row(0) * gr[0] + jp.row(1) * gr[1];
                    let res = rv[i * c + ch];
                    hm += row.transpose() * row;
                    g += row.transpose() * res;
                    let jd = gr[0] * duv.x + gr[1] * duv.y;
                    num[i] += jd * res;
                    den[i] += jd * jd;
                }
            }
            let mut damped = hm;
            for a in 0..6 {
                damped[(a, a)] += cfg.lm_damping * hm[(a, a)] + 1e-9;
            }
            let step = damped.try_inverse().map(|inv| -(inv * g)).unwrap_or_else(Vector6::zeros);
            let mut s6 = [0.0; 6];
            for a in 0..6 {
                s6[a] = if step[a].is_finite() { step[a] } else { 0.0 };
            }
            lm_steps.push(s6);
        } else {
            lm_steps.push([0.0; 6]);
        }
        residuals.push(r);
        masks.push(mask);
    }
    let count: Vec<f64> = (0..n).map(|i| masks.iter().map(|m| m[i]).sum()).collect();
    let pixel_valid: Vec<f64> = count.iter().map(|&c| if c > 0.0 { 1.0 } else { 0.0 }).collect();
    let mut total = residuals[0];
    for &r in &residuals[1..] {
        total = tape.add(total, r)?;
    }
    let inv_count = tape.constant(Tensor::new(&[n, 1], count.iter().map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 }).collect())?);
    let mean_residual = tape.mul(total, inv_count)?;
    let valid_fraction = masks.iter().map(|m| m.iter().sum::<f64>() / n as f64).collect();
    let patch_valid: Vec<Vec<bool>> =
        masks.iter().map(|m| m.chunks(ppp).map(|p| p.iter().any(|v| *v > 0.0)).collect()).collect();
    for p in 0..state.centers.len() {
        if patch_valid.iter().all(|pv| !pv[p]) {
            log::warn!("cost map: patch {p} has no valid neighbour and is dropped");
        }
    }
    let depth_steps = (0..n)
        .map(|i| {
            if pixel_valid[i] > 0.0 && den[i] > 0.0 {
                let s = -num[i] / (den[i] * (1.0 + cfg.lm_damping) + 1e-12);
                if s.is_finite() {
                    s
                } else {
                    0.0
                }
            } else {
                0.0
            }
        })
        .collect();
    Ok(CostMap {
        residuals,
        masks,
        mean_residual,
        pixel_valid,
        target_features: target,
        valid_fraction,
        patch_valid,
        lm_steps,
        depth_steps,
    })
}

/// Learned update operator.
#[derive(Clone, Debug)]
pub struct PoseDepthOptimizer {
    pub enc_shared: Linear,
    pub enc_neighbor: Linear,
    pub enc_conv: Conv,
    pub gru: Gru,
    pub pose_hidden: Linear,
    pub pose_lm: Linear,
    pub depth_hidden: Linear,
    pub depth_gn: Linear,
    pub config: OptimizerConfig,
    pub channels: usize,
}

impl PoseDepthOptimizer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, channels: usize, config: OptimizerConfig) -> Self {
        let g = Group::Optimizer;
        let e = config.enc_width;
        let enc_shared = Linear::new(store, rng, "opt.enc_shared", g, 2 * channels + 3, e);
        let enc_neighbor = Linear::new(store, rng, "opt.enc_neighbor", g, channels, e);
        let enc_conv = Conv::new(store, rng, "opt.enc_conv", g, 3, e, e, 2);
        let gru = Gru::new(store, rng, "opt.gru", g, e + 6, config.hidden);
        let pose_hidden = Linear::zeroed(store, "opt.pose_hidden", g, config.hidden, 6);
        let pose_lm = Linear::zeroed(store, "opt.pose_lm", g, 6, 6);
        let depth_hidden = Linear::zeroed(store, "opt.depth_hidden", g, config.hidden + e, 1);
        let depth_gn = Linear::zeroed(store, "opt.depth_gn", g, 1, 1);
        // start as a damped Gauss-Newton solver: cap * tanh(step / cap) ~ step
        let w = store.get_mut(pose_lm.w);
        for a in 0..6 {
            w.data_mut()[a * 6 + a] = 1.0 / config.twist_cap;
        }
        store.get_mut(depth_gn.w).data_mut()[0] = 1.0 / config.depth_cap;
        Self { enc_shared, enc_neighbor, enc_conv, gru, pose_hidden, pose_lm, depth_hidden, depth_gn, config, channels }
    }

    /// One recurrent step: encode the cost map, advance the GRU, apply the
    /// capped pose and depth corrections.
    pub fn recurrent_update(&self, tape: &mut Tape, p: &Bound, state: &OptState, cost: &CostMap, norm: &RunningNorm) -> Result<OptState> {
        let cfg = &self.config;
        if state.iteration >= cfg.t_max {
            return Err(Error::State(format!("optimizer already ran {} of {} iterations", state.iteration, cfg.t_max)));
        }
        let m = state.poses.len();
        let n = cost.pixel_valid.len();
        let np = state.centers.len();
        let (s, e) = (cfg.patch, cfg.enc_width);
        let pv = tape.constant(Tensor::new(&[n, 1], cost.pixel_valid.clone())?);
        let rbar = norm.normalize(tape, cost.mean_residual)?;
        let rbar = tape.mul(rbar, pv)?;
        let coords: Vec<f64> = (0..np)
            .flat_map(|_| (0..s * s).flat_map(move |i| [((i % s) as f64 - s as f64 / 2.0) / (s as f64 / 2.0), ((i / s) as f64 - s as f64 / 2.0) / (s as f64 / 2.0)]))
            .collect();
        let coords = tape.constant(Tensor::new(&[n, 2], coords)?);
        let shared_in = tape.concat(&[rbar, cost.target_features, state.inv_depth, coords], 1)?;
        let shared = self.enc_shared.forward(tape, p, shared_in)?;
        let mut per = Vec::with_capacity(m);
        for (j, &r) in cost.residuals.iter().enumerate() {
            let rn = norm.normalize(tape, r)?;
            let mv = tape.constant(Tensor::new(&[n, 1], cost.masks[j].clone())?);
            per.push(tape.mul(rn, mv)?);
        }
        let stacked = tape.concat(&per, 0)?;
        let own = self.enc_neighbor.forward(tape, p, stacked)?;
        let own = tape.reshape(own, &[m, n, e])?;
        let enc = tape.add(own, shared)?;
        let enc = tape.relu(enc)?;
        let img = tape.reshape(enc, &[m * np, s, s, e])?;
        let conv = self.enc_conv.forward(tape, p, img)?;
        let conv = tape.relu(conv)?;
        let cells = (s / 2) * (s / 2);
        let conv = tape.reshape(conv, &[m, np * cells, e])?;
        let mut weights = Vec::with_capacity(m * np * cells);
        for j in 0..m {
            let valid = cost.patch_valid[j].iter().filter(|v| **v).count();
            for pch in 0..np {
                let wgt = if cost.patch_valid[j][pch] { 1.0 / (valid * cells) as f64 } else { 0.0 };
                weights.extend(std::iter::repeat(wgt).take(cells));
            }
        }
        let wv = tape.constant(Tensor::new(&[m, np * cells, 1], weights)?);
        let pooled = tape.mul(conv, wv)?;
        let pooled = tape.sum_axis(pooled, 1)?;
        let lm: Vec<f64> = cost.lm_steps.iter().flatten().copied().collect();
        let lm = tape.constant(Tensor::new(&[m, 6], lm)?);
        let lm_in = tape.scale(lm, 1.0 / cfg.twist_cap)?;
        let x = tape.concat(&[pooled, lm_in], 1)?;
        let hidden = self.gru.forward(tape, p, state.hidden, x)?;

        let a = self.pose_hidden.forward(tape, p, hidden)?;
        let b = self.pose_lm.forward(tape, p, lm)?;
        let pre = tape.add(a, b)?;
        let t = tape.tanh(pre)?;
        let delta = tape.scale(t, cfg.twist_cap)?;
        if let Some(bad) = tape.value(delta).data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Diverged { iteration: state.iteration, detail: format!("pose head output {bad} is not finite") });
        }
        let deltas = TapePose::exp_batch(tape, delta)?;
        let poses = state
            .poses
            .iter()
            .zip(&deltas)
            .map(|(pose, d)| pose.premultiply(tape, d))
            .collect::<Result<Vec<_>>>()?;

        let ebar = tape.mean_axis(enc, 0)?;
        let hbar = tape.mean_axis(hidden, 0)?;
        let hbar = tape.broadcast_to(hbar, &[n, cfg.hidden])?;
        let din = tape.concat(&[hbar, ebar], 1)?;
        let da = self.depth_hidden.forward(tape, p, din)?;
        let gn = tape.constant(Tensor::new(&[n, 1], cost.depth_steps.clone())?);
        let db = self.depth_gn.forward(tape, p, gn)?;
        let dpre = tape.add(da, db)?;
        let dt = tape.tanh(dpre)?;
        let dd = tape.scale(dt, cfg.depth_cap)?;
        if let Some(bad) = tape.value(dd).data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Diverged { iteration: state.iteration, detail: format!("depth head output {bad} is not finite") });
        }
        let d = tape.add(state.inv_depth, dd)?;
        let inv_depth = tape.clamp(d, 1.0 / cfg.far, 1.0 / cfg.near)?;
        Ok(OptState { poses, inv_depth, hidden, iteration: state.iteration + 1, centers: state.centers.clone() })
    }

    /// Runs `t_max` rounds of cost map and update. When `norm_update` is
    /// set the residual statistics absorb every cost map seen.
    #[allow(clippy::too_many_arguments)]
    pub fn optimize(
        &self,
        tape: &mut Tape,
        p: &Bound,
        f_i: Var,
        f_js: &[Var],
        k: &Intrinsics,
        window: [usize; 4],
        init: OptState,
        norm: &mut RunningNorm,
        norm_update: bool,
    ) -> Result<OptimizeOutput> {
        let mut state = init;
        let mut history = vec![IterationRecord { iteration: 0, poses: state.pose_values(tape), mean_cost: Vec::new() }];
        for _ in 0..self.config.t_max {
            let cost = build_cost_map(tape, f_i, f_js, k, &state, &self.config, window)?;
            if norm_update {
                for (j, &r) in cost.residuals.iter().enumerate() {
                    let v = tape.value(r).clone();
                    norm.update(&v, &cost.masks[j]);
                }
            }
            let costs: Vec<f64> = (0..f_js.len()).map(|j| cost.neighbor_cost(tape, j, self.config.robust)).collect();
            history.last_mut().expect("history").mean_cost = costs;
            state = self.recurrent_update(tape, p, &state, &cost, norm)?;
            history.push(IterationRecord { iteration: state.iteration, poses: state.pose_values(tape), mean_cost: Vec::new() });
        }
        Ok(OptimizeOutput { state, history })
    }
}

/// Snapshot of the relative poses after each iteration.
#[derive(Clone, Debug)]
pub struct IterationRecord {
    pub iteration: usize,
    pub poses: Vec<SE3Pose>,
    /// Cost per neighbour of the map built from these poses (empty for the
    /// final state, which no map was built from).
    pub mean_cost: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct OptimizeOutput {
    pub state: OptState,
    pub history: Vec<IterationRecord>,
}

/// One line of the trajectory dump.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub target: usize,
    pub neighbor: usize,
    pub iteration: usize,
    pub rot_err_deg: f64,
    pub trans_err: f64,
    pub mean_cost: f64,
}

pub const TRAJECTORY_HEADER: &str = "target,neighbor,iteration,rot_err_deg,trans_err,mean_cost";

/// Aligned per-neighbour errors of every iteration: the batch is the target
/// at identity plus the relative poses, compared with ground truth.
pub fn trajectory_rows(target: usize, neighbors: &[usize], history: &[IterationRecord], gt_target: &SE3Pose, gt_neighbors: &[SE3Pose]) -> Result<Vec<TrajectoryRow>> {
    let mut truth = vec![*gt_target];
    truth.extend_from_slice(gt_neighbors);
    let mut rows = Vec::new();
    for rec in history {
        let mut pred = vec![SE3Pose::identity()];
        pred.extend_from_slice(&rec.poses);
        let rep = pose_error(&pred, &truth)?;
        for (j, &nb) in neighbors.iter().enumerate() {
            rows.push(TrajectoryRow {
                target,
                neighbor: nb,
                iteration: rec.iteration,
                rot_err_deg: rep.per_pose_rot_deg[j + 1],
                trans_err: rep.per_pose_trans[j + 1],
                mean_cost: rec.mean_cost.get(j).copied().unwrap_or(f64::NAN),
            });
        }
    }
    Ok(rows)
}

pub fn write_trajectory_csv(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut body = String::from(TRAJECTORY_HEADER);
    body.push('\n');
    for r in rows {
        body.push_str(&format!("{},{},{},{},{},{}\n", r.target, r.neighbor, r.iteration, r.rot_err_deg, r.trans_err, r.mean_cost));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_epsilon_gives_identity_and_mid_range_depth() {
        let cfg = OptimizerConfig { eps: 0.0, near: 1.0, far: 9.0, ..Default::default() };
        let mut tape = Tape::new();
        let st = init_state(&mut tape, 3, vec![[8, 8]], &cfg, &mut rng(0)).unwrap();
        for p in st.pose_values(&tape) {
            assert!(p.max_abs_diff(&SE3Pose::identity()) == 0.0);
        }
        assert!(st.depth_values(&tape).iter().all(|d| (d - 5.0 / 9.0).abs() < 1e-15));
        assert_eq!(tape.value(st.hidden).max_abs(), 0.0);
        assert_eq!(st.iteration, 0);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = OptimizerConfig::default();
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = init_state(&mut t1, 4, vec![[8, 8]], &cfg, &mut rng(9)).unwrap();
        let b = init_state(&mut t2, 4, vec![[8, 8]], &cfg, &mut rng(9)).unwrap();
        assert_eq!(a.pose_values(&t1), b.pose_values(&t2));
        assert!(init_state(&mut t1, 0, vec![[8, 8]], &cfg, &mut rng(9)).is_err());
    }

    fn toy_maps(tape: &mut Tape, seed: u64) -> (Var, Intrinsics) {
        let mut r = rng(seed);
        let f = Tensor::from_fn(&[24, 24, 8], |i| {
            let (x, y, c) = ((i / 8) % 24, i / 192, i % 8);
            (0.4 * x as f64 + 0.9 * c as f64).sin() + (0.3 * y as f64 * (1.0 + 0.1 * c as f64)).cos() + 0.01 * r.gen_range(-1.0..1.0)
        });
        (tape.constant(f), Intrinsics::from_fov(96, 96, 60.0).downscaled(4))
    }

    #[test]
    fn identity_rig_has_zero_residual() {
        let cfg = OptimizerConfig { eps: 0.0, ..Default::default() };
        let mut tape = Tape::new();
        let (f, k) = toy_maps(&mut tape, 1);
        let st = init_state(&mut tape, 2, vec![[12, 12], [9, 14]], &cfg, &mut rng(0)).unwrap();
        let cm = build_cost_map(&mut tape, f, &[f, f], &k, &st, &cfg, [4, 20, 4, 20]).unwrap();
        // back-projection then projection reproduces the pixel up to rounding
        assert!(tape.value(cm.mean_residual).max_abs() < 1e-12);
        assert!(cm.valid_fraction.iter().all(|v| *v > 0.5));
        assert!(cm.lm_steps.iter().flatten().all(|v| v.abs() < 1e-9), "{:?}", cm.lm_steps);
    }

    #[test]
    fn patch_centres_must_respect_the_border() {
        let cfg = OptimizerConfig::default();
        let mut tape = Tape::new();
        let (f, k) = toy_maps(&mut tape, 1);
        let st = init_state(&mut tape, 1, vec![[7, 12]], &cfg, &mut rng(0)).unwrap();
        assert!(matches!(build_cost_map(&mut tape, f, &[f], &k, &st, &cfg, [0, 23, 0, 23]), Err(Error::Domain(_))));
        let cs = sample_patch_centers(&mut rng(3), 24, 24, &cfg).unwrap();
        assert!(cs.iter().all(|c| (8..=16).contains(&c[0]) && (8..=16).contains(&c[1])));
    }

    fn zero_heads(store: &mut ParamStore, m: &PoseDepthOptimizer) {
        for l in [m.pose_hidden, m.pose_lm, m.depth_hidden, m.depth_gn] {
            for id in [l.w, l.b] {
                for v in store.get_mut(id).data_mut() {
                    *v = 0.0;
                }
            }
        }
    }

    #[test]
    fn zero_heads_leave_the_state_unchanged() {
        let cfg = OptimizerConfig { t_max: 2, ..Default::default() };
        let mut store = ParamStore::new();
        let m = PoseDepthOptimizer::new(&mut store, &mut rng(1), 8, cfg);
        zero_heads(&mut store, &m);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| true);
        let (f, k) = toy_maps(&mut tape, 2);
        let (g, _) = toy_maps(&mut tape, 3);
        let st = init_state(&mut tape, 1, vec![[12, 12]], &cfg, &mut rng(4)).unwrap();
        let before = (st.pose_values(&tape), st.depth_values(&tape));
        let cm = build_cost_map(&mut tape, f, &[g], &k, &st, &cfg, [4, 20, 4, 20]).unwrap();
        let next = m.recurrent_update(&mut tape, &p, &st, &cm, &RunningNorm::new(8, 0.9)).unwrap();
        assert_eq!(next.iteration, 1);
        for (a, b) in before.0.iter().zip(next.pose_values(&tape)) {
            assert!(a.max_abs_diff(&b) < 1e-15);
        }
        assert_eq!(before.1, next.depth_values(&tape));
    }

    #[test]
    fn updates_respect_the_caps() {
        let cfg = OptimizerConfig { t_max: 1, ..Default::default() };
        let mut store = ParamStore::new();
        let m = PoseDepthOptimizer::new(&mut store, &mut rng(1), 8, cfg);
        let mut r = rng(5);
        for l in [m.pose_hidden, m.pose_lm, m.depth_hidden, m.depth_gn] {
            for id in [l.w, l.b] {
                for v in store.get_mut(id).data_mut() {
                    *v = r.gen_range(-50.0..50.0);
                }
            }
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| true);
        let (f, k) = toy_maps(&mut tape, 2);
        let (g, _) = toy_maps(&mut tape, 3);
        let st = init_state(&mut tape, 2, vec![[12, 12]], &cfg, &mut rng(4)).unwrap();
        let before = st.pose_values(&tape);
        let d0 = st.depth_values(&tape);
        let cm = build_cost_map(&mut tape, f, &[g, f], &k, &st, &cfg, [4, 20, 4, 20]).unwrap();
        let next = m.recurrent_update(&mut tape, &p, &st, &cm, &RunningNorm::new(8, 0.9)).unwrap();
        for (a, b) in before.iter().zip(next.pose_values(&tape)) {
            let d = b.compose(&a.inverse()).log().unwrap();
            assert!(d.0.iter().all(|v| v.abs() <= cfg.twist_cap + 1e-12), "{d:?}");
        }
        for (a, b) in d0.iter().zip(next.depth_values(&tape)) {
            assert!((a - b).abs() <= cfg.depth_cap + 1e-12);
            assert!((1.0 / cfg.far..=1.0 / cfg.near).contains(&b));
        }
        assert!(m.recurrent_update(&mut tape, &p, &next, &cm, &RunningNorm::new(8, 0.9)).is_err());
    }

    #[test]
    fn zero_iterations_return_the_initial_state() {
        let cfg = OptimizerConfig { t_max: 0, ..Default::default() };
        let mut store = ParamStore::new();
        let m = PoseDepthOptimizer::new(&mut store, &mut rng(1), 8, cfg);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| true);
        let (f, k) = toy_maps(&mut tape, 2);
        let st = init_state(&mut tape, 1, vec![[12, 12]], &cfg, &mut rng(4)).unwrap();
        let poses = st.pose_values(&tape);
        let out = m.optimize(&mut tape, &p, f, &[f], &k, [4, 20, 4, 20], st, &mut RunningNorm::new(8, 0.9), false).unwrap();
        assert_eq!(out.state.pose_values(&tape), poses);
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn running_norm_tracks_masked_statistics() {
        let mut n = RunningNorm::new(2, 0.5);
        let v = Tensor::new(&[3, 2], vec![1.0, 10.0, 3.0, 20.0, 100.0, 100.0]).unwrap();
        n.update(&v, &[1.0, 1.0, 0.0]);
        assert_eq!(n.mean, vec![2.0, 15.0]);
        assert_eq!(n.var, vec![1.0, 25.0]);
        n.update(&v, &[1.0, 1.0, 0.0]);
        assert_eq!(n.mean, vec![2.0, 15.0]);
    }

    #[test]
    fn feature_gradient_matches_bilinear_slope() {
        let map = Tensor::from_fn(&[4, 5, 1], |i| (i % 5) as f64 * 2.0 + (i / 5) as f64 * 3.0);
        let g = feature_gradient(&map, 1.3, 2.6).unwrap();
        assert!((g[0][0] - 2.0).abs() < 1e-12 && (g[0][1] - 3.0).abs() < 1e-12);
        assert!(feature_gradient(&map, -0.1, 1.0).is_none());
    }
}
