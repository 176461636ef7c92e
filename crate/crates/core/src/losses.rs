//! Training objectives and evaluation metrics.

use nalgebra::{Matrix3, Vector3};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::SE3Pose;
use crate::imageio::Image;

/// SSIM stabilisers for intensities in `[0,1]`.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Default SSIM/L1 blend of the warped photometric loss.
pub const DEFAULT_ALPHA: f64 = 0.85;
/// Default schedule exponent.
pub const DEFAULT_BETA: f64 = -1e-4;
/// Schedule exponent as printed alongside the original loss.
pub const PRINTED_BETA: f64 = -1e5;
pub const PSNR_CAP: f64 = 99.0;

const NORM_EPS: f64 = 1e-18;

/// Mean per-pixel L2 colour error over the pixels with `mask` set.
pub fn loss_rgb(tape: &mut Tape, rendered: Var, truth: Var, mask: &[bool]) -> Result<Var> {
    let s = tape.shape(rendered).to_vec();
    if s.len() != 2 || tape.shape(truth) != s.as_slice() || mask.len() != s[0] {
        return Err(Error::Shape(format!(
            "loss_rgb: rendered {s:?}, truth {:?}, mask {}",
            tape.shape(truth),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::UndefinedLoss("loss_rgb: every ray is masked".into()));
    }
    let d = tape.sub(rendered, truth)?;
    let sq = tape.mul(d, d)?;
    let ss = tape.sum_axis(sq, 1)?;
    // sqrt(x + eps) - sqrt(eps) is exactly 0 at x = 0 and has a finite slope
    let ss = tape.add_scalar(ss, NORM_EPS)?;
    let n = tape.sqrt(ss)?;
    let n = tape.add_scalar(n, -NORM_EPS.sqrt())?;
    let m = tape.constant(Tensor::new(&[s[0]], mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?);
    let nm = tape.mul(n, m)?;
    let total = tape.sum(nm)?;
    tape.scale(total, 1.0 / count as f64)
}

/// Edge-aware smoothness of an `[h, w]` inverse-depth map given the
/// `[h, w, 3]` image at the same pixels: per pixel
/// `|dx D| exp(-|dx I|) + |dy D| exp(-|dy I|)` with forward differences
/// (image gradient averaged over channels), averaged over pixels whose
/// right and lower neighbours exist and all three are valid.
pub fn loss_depth_smooth(tape: &mut Tape, inv_depth: Var, image: &Tensor, valid: &[bool]) -> Result<Var> {
    let s = tape.shape(inv_depth).to_vec();
    let (h, w) = match s.as_slice() {
        [h, w] => (*h, *w),
        _ => return Err(Error::Shape(format!("loss_depth_smooth: depth must be [h,w], got {s:?}"))),
    };
    if image.shape() != [h, w, 3] || valid.len() != h * w {
        return Err(Error::Shape(format!("loss_depth_smooth: image {:?} vs depth {s:?}", image.shape())));
    }
    if h < 2 || w < 2 {
        return Err(Error::Shape("loss_depth_smooth: need at least 2x2 pixels".into()));
    }
    let img = image.data();
    let grad = |a: usize, b: usize| (0..3).map(|c| (img[3 * a + c] - img[3 * b + c]).abs()).sum::<f64>() / 3.0;
    let (mut wx, mut wy, mut m) = (Vec::new(), Vec::new(), Vec::new());
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let i = y * w + x;
            wx.push((-grad(i + 1, i)).exp());
            wy.push((-grad(i + w, i)).exp());
            m.push(if valid[i] && valid[i + 1] && valid[i + w] { 1.0 } else { 0.0 });
        }
    }
    let count: f64 = m.iter().sum();
    if count == 0.0 {
        return Ok(tape.scalar(0.0));
    }
    let right = tape.slice(inv_depth, 1, 1, w)?;
    let left = tape.slice(inv_depth, 1, 0, w - 1)?;
    let dx = tape.sub(right, left)?;
    let dx = tape.slice(dx, 0, 0, h - 1)?;
    let down = tape.slice(inv_depth, 0, 1, h)?;
    let up = tape.slice(inv_depth, 0, 0, h - 1)?;
    let dy = tape.sub(down, up)?;
    let dy = tape.slice(dy, 1, 0, w - 1)?;
    let shape = [h - 1, w - 1];
    let wxv = tape.constant(Tensor::new(&shape, wx.iter().zip(&m).map(|(a, b)| a * b).collect())?);
    let wyv = tape.constant(Tensor::new(&shape, wy.iter().zip(&m).map(|(a, b)| a * b).collect())?);
    let ax = tape.abs(dx)?;
    let ay = tape.abs(dy)?;
    let tx = tape.mul(ax, wxv)?;
    let ty = tape.mul(ay, wyv)?;
    let t = tape.add(tx, ty)?;
    let total = tape.sum(t)?;
    tape.scale(total, 1.0 / count)
}

/// Normalised 1-D Gaussian taps of the 11x11, sigma 1.5 SSIM window.
pub fn gaussian_taps() -> [f64; 11] {
    let mut g = [0.0; 11];
    for (k, v) in g.iter_mut().enumerate() {
        let d = k as f64 - 5.0;
        *v = (-d * d / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Dense `[h*w, h*w]` Gaussian window operator truncated at the borders.
pub fn blur_matrix(h: usize, w: usize) -> Tensor {
    let g = gaussian_taps();
    let n = h * w;
    let mut m = vec![0.0; n * n];
    for y in 0..h {
        for x in 0..w {
            let row = (y * w + x) * n;
            for dy in -5i64..=5 {
                let yy = y as i64 + dy;
                if yy < 0 || yy >= h as i64 {
                    continue;
                }
                for dx in -5i64..=5 {
                    let xx = x as i64 + dx;
                    if xx < 0 || xx >= w as i64 {
                        continue;
                    }
                    m[row + yy as usize * w + xx as usize] = g[(dy + 5) as usize] * g[(dx + 5) as usize];
                }
            }
        }
    }
    Tensor::from_parts(vec![n, n], m)
}

/// Masked SSIM map on the tape for `[h*w, 3]` images: window statistics
/// are taken over masked pixels only, `mu = B(m x) / B(m)` and so on.
pub fn ssim_map_tape(tape: &mut Tape, x: Var, y: Var, mask: &[f64], blur: &Tensor) -> Result<Var> {
    let n = mask.len();
    let bm = tape.constant(blur.clone());
    let den: Vec<f64> = (0..n)
        .map(|i| {
            let r = &blur.data()[i * n..(i + 1) * n];
            r.iter().zip(mask).map(|(a, b)| a * b).sum::<f64>().max(1e-12)
        })
        .collect();
    let inv_den = tape.constant(Tensor::new(&[n, 1], den.iter().map(|d| 1.0 / d).collect())?);
    let m = tape.constant(Tensor::new(&[n, 1], mask.to_vec())?);
    let window = |tape: &mut Tape, v: Var| -> Result<Var> {
        let mv = tape.mul(v, m)?;
        let b = tape.matmul(bm, mv)?;
        tape.mul(b, inv_den)
    };
    let mx = window(tape, x)?;
    let my = window(tape, y)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let exx = window(tape, xx)?;
    let eyy = window(tape, yy)?;
    let exy = window(tape, xy)?;
    let mxx = tape.mul(mx, mx)?;
    let myy = tape.mul(my, my)?;
    let mxy = tape.mul(mx, my)?;
    let vx = tape.sub(exx, mxx)?;
    let vy = tape.sub(eyy, myy)?;
    let cxy = tape.sub(exy, mxy)?;
    let a = tape.scale(mxy, 2.0)?;
    let a = tape.add_scalar(a, SSIM_C1)?;
    let b = tape.scale(cxy, 2.0)?;
    let b = tape.add_scalar(b, SSIM_C2)?;
    let c = tape.add(mxx, myy)?;
    let c = tape.add_scalar(c, SSIM_C1)?;
    let d = tape.add(vx, vy)?;
    let d = tape.add_scalar(d, SSIM_C2)?;
    let num = tape.mul(a, b)?;
    let den = tape.mul(c, d)?;
    tape.div(num, den)
}

/// One neighbour's contribution to the warped photometric loss: the
/// neighbour image sampled at the warped patch pixels and its validity.
#[derive(Clone, Debug)]
pub struct WarpedPatch {
    pub colors: Var,
    pub mask: Vec<f64>,
}

/// Masked `alpha (1 - SSIM)/2 + (1 - alpha) |I' - I|` over an `h x w`
/// patch, averaged over valid pixels and then over neighbours that have
/// any valid pixel.
pub fn loss_photo_warp(tape: &mut Tape, target: Var, warped: &[WarpedPatch], blur: &Tensor, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("loss_photo_warp: alpha {alpha} outside [0,1]")));
    }
    let n = tape.shape(target)[0];
    if blur.shape() != [n, n] {
        return Err(Error::Shape(format!("loss_photo_warp: blur {:?} for {n} pixels", blur.shape())));
    }
    let mut terms = Vec::new();
    for wp in warped {
        let count: f64 = wp.mask.iter().sum();
        if count == 0.0 {
            continue;
        }
        let l1 = {
            let d = tape.sub(wp.colors, target)?;
            let a = tape.abs(d)?;
            tape.mean_axis(a, 1)?
        };
        let mut per = tape.scale(l1, 1.0 - alpha)?;
        if alpha > 0.0 {
            let s = ssim_map_tape(tape, wp.colors, target, &wp.mask, blur)?;
            let s = tape.mean_axis(s, 1)?;
            let ds = tape.neg(s)?;
            let ds = tape.add_scalar(ds, 1.0)?;
            let ds = tape.scale(ds, 0.5 * alpha)?;
            per = tape.add(per, ds)?;
        }
        let m = tape.constant(Tensor::new(&[n], wp.mask.clone())?);
        let pm = tape.mul(per, m)?;
        let s = tape.sum(pm)?;
        terms.push(tape.scale(s, 1.0 / count)?);
    }
    if terms.is_empty() {
        return Err(Error::UndefinedLoss("loss_photo_warp: no neighbour has a valid warp".into()));
    }
    let k = terms.len() as f64;
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, 1.0 / k)
}

/// Logged loss components and their scheduled combination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_rgb: f64,
    pub l_depth: f64,
    pub l_photo: f64,
    pub w: f64,
    pub l_final: f64,
    pub iteration: u64,
}

/// Schedule weight `2^(beta t)`.
pub fn schedule_weight(beta: f64, t: u64) -> f64 {
    (beta * t as f64).exp2()
}

/// Plain-value combination, identical operation order to [`loss_final`].
pub fn combine(l_rgb: f64, l_depth: f64, l_photo: f64, iteration: u64, beta: f64) -> LossReport {
    let w = schedule_weight(beta, iteration);
    let l_final = (l_depth + l_photo) * w + l_rgb * (1.0 - w);
    LossReport { l_rgb, l_depth, l_photo, w, l_final, iteration }
}

/// `w (L_depth + L_photo) + (1 - w) L_rgb` on the tape with its report.
pub fn loss_final(tape: &mut Tape, l_rgb: Var, l_depth: Var, l_photo: Var, iteration: u64, beta: f64) -> Result<(Var, LossReport)> {
    let w = schedule_weight(beta, iteration);
    let geo = tape.add(l_depth, l_photo)?;
    let geo = tape.scale(geo, w)?;
    let rgb = tape.scale(l_rgb, 1.0 - w)?;
    let f = tape.add(geo, rgb)?;
    let report = LossReport {
        l_rgb: tape.value(l_rgb).item(),
        l_depth: tape.value(l_depth).item(),
        l_photo: tape.value(l_photo).item(),
        w,
        l_final: tape.value(f).item(),
        iteration,
    };
    Ok((f, report))
}

/// PSNR in dB for `[0,1]` images, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Shape(format!("images {}x{} and {}x{} differ", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

fn blur_plane(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let g = gaussian_taps();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, gk) in g.iter().enumerate() {
                let xx = x as i64 + k as i64 - 5;
                if xx >= 0 && xx < w as i64 {
                    s += gk * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, gk) in g.iter().enumerate() {
                let yy = y as i64 + k as i64 - 5;
                if yy >= 0 && yy < h as i64 {
                    s += gk * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Per-pixel, per-channel SSIM map (`[h*w*3]`, interleaved) with the same
/// truncated, renormalised window as the tape version.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Vec<f64>> {
    same_dims(a, b)?;
    let (w, h) = (a.width, a.height);
    let norm = blur_plane(&vec![1.0; w * h], w, h);
    let mut out = vec![0.0; w * h * 3];
    for c in 0..3 {
        let x: Vec<f64> = (0..w * h).map(|i| a.data[3 * i + c]).collect();
        let y: Vec<f64> = (0..w * h).map(|i| b.data[3 * i + c]).collect();
        let f = |v: &[f64]| -> Vec<f64> { blur_plane(v, w, h).iter().zip(&norm).map(|(s, n)| s / n).collect() };
        let mx = f(&x);
        let my = f(&y);
        let exx = f(&x.iter().map(|v| v * v).collect::<Vec<_>>());
        let eyy = f(&y.iter().map(|v| v * v).collect::<Vec<_>>());
        let exy = f(&x.iter().zip(&y).map(|(p, q)| p * q).collect::<Vec<_>>());
        for i in 0..w * h {
            let (mxx, myy, mxy) = (mx[i] * mx[i], my[i] * my[i], mx[i] * my[i]);
            let num = (mxy * 2.0 + SSIM_C1) * ((exy[i] - mxy) * 2.0 + SSIM_C2);
            let den = (mxx + myy + SSIM_C1) * ((exx[i] - mxx) + (eyy[i] - myy) + SSIM_C2);
            out[3 * i + c] = num / den;
        }
    }
    Ok(out)
}

/// Mean of [`ssim_map`].
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let m = ssim_map(a, b)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

/// Similarity `x -> s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros(), scale: 1.0 }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }

    /// Moves a world-to-camera pose so that its centre maps through `self`
    /// and its camera-to-world rotation is pre-rotated by `R`.
    pub fn apply_pose(&self, p: &SE3Pose) -> SE3Pose {
        let r = p.rotation * self.rotation.transpose();
        let c = self.apply(&p.center());
        SE3Pose { rotation: r, translation: -(r * c) }
    }
}

/// Closed-form least-squares similarity with `dst ~ s R src + t`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::Shape(format!("umeyama: {} vs {} points", src.len(), dst.len())));
    }
    if src.len() < 3 {
        return Err(Error::DegenerateAlignment(format!("need at least 3 points, got {}", src.len())));
    }
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vector3<f64>>() / n;
    let md = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut ss = Matrix3::zeros();
    let mut var_s = 0.0;
    for (a, b) in src.iter().zip(dst) {
        let (da, db) = (a - ms, b - md);
        cov += db * da.transpose();
        ss += da * da.transpose();
        var_s += da.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let spread = ss.symmetric_eigenvalues();
    let mut ev: Vec<f64> = spread.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::DegenerateAlignment("camera centres are collinear or coincident".into()));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("svd u"), svd.v_t.expect("svd v"));
    let mut sgn = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        sgn[(2, 2)] = -1.0;
    }
    let rotation = u * sgn * v_t;
    let d = svd.singular_values;
    let trace = d[0] * sgn[(0, 0)] + d[1] * sgn[(1, 1)] + d[2] * sgn[(2, 2)];
    let scale = trace / var_s;
    let translation = md - rotation * ms * scale;
    Ok(Similarity { rotation, translation, scale })
}

/// Aligned pose errors of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseErrorReport {
    pub rot_err_deg: f64,
    pub trans_err: f64,
    pub trans_err_x100: f64,
    pub per_pose_rot_deg: Vec<f64>,
    pub per_pose_trans: Vec<f64>,
    pub alignment: Similarity,
}

/// Umeyama-aligns predicted world-to-camera poses (any gauge, e.g. the
/// target at identity and relative poses for neighbours) to ground truth
/// on camera centres, then averages geodesic rotation and centre errors.
pub fn pose_error(predicted: &[SE3Pose], truth: &[SE3Pose]) -> Result<PoseErrorReport> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!("pose_error: {} predictions for {} poses", predicted.len(), truth.len())));
    }
    let src: Vec<_> = predicted.iter().map(SE3Pose::center).collect();
    let dst: Vec<_> = truth.iter().map(SE3Pose::center).collect();
    let sim = umeyama(&src, &dst)?;
    let (mut rot, mut tr) = (Vec::new(), Vec::new());
    for (p, g) in predicted.iter().zip(truth) {
        let aligned = sim.apply_pose(p);
        rot.push(aligned.rotation_angle_to(g).to_degrees());
        tr.push((aligned.center() - g.center()).norm());
    }
    let n = predicted.len() as f64;
    let rot_err_deg = rot.iter().sum::<f64>() / n;
    let trans_err = tr.iter().sum::<f64>() / n;
    Ok(PoseErrorReport {
        rot_err_deg,
        trans_err,
        trans_err_x100: trans_err * 100.0,
        per_pose_rot_deg: rot,
        per_pose_trans: tr,
        alignment: sim,
    })
}
