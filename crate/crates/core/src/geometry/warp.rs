//! Differentiable versions of the pose and projection operations, recorded
//! on a [`Tape`] so gradients reach twists, depths and feature maps.

use super::camera::{Intrinsics, MIN_DEPTH};
use super::pose::SE3Pose;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A rigid transform living on a tape: `r` is `[3,3]`, `t` is `[1,3]`.
#[derive(Clone, Copy, Debug)]
pub struct TapePose {
    pub r: Var,
    pub t: Var,
}

impl TapePose {
    pub fn constant(tape: &mut Tape, p: &SE3Pose) -> Result<Self> {
        let r = Tensor::new(&[3, 3], p.rotation.transpose().as_slice().to_vec())?;
        let t = Tensor::new(&[1, 3], p.translation.as_slice().to_vec())?;
        Ok(Self { r: tape.constant(r), t: tape.constant(t) })
    }

    pub fn identity(tape: &mut Tape) -> Result<Self> {
        Self::constant(tape, &SE3Pose::identity())
    }

    /// Exponentials of each row of a `[b,6]` twist batch.
    pub fn exp_batch(tape: &mut Tape, twists: Var) -> Result<Vec<Self>> {
        let m = tape.se3_exp(twists)?;
        let b = tape.shape(m)[0];
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let row = tape.slice(m, 0, i, i + 1)?;
            let r = tape.slice(row, 1, 0, 9)?;
            let r = tape.reshape(r, &[3, 3])?;
            let t = tape.slice(row, 1, 9, 12)?;
            out.push(Self { r, t });
        }
        Ok(out)
    }

    /// Left composition `delta * self`.
    pub fn premultiply(&self, tape: &mut Tape, delta: &TapePose) -> Result<Self> {
        let r = tape.matmul(delta.r, self.r)?;
        let drt = tape.transpose(delta.r)?;
        let t = tape.matmul(self.t, drt)?;
        let t = tape.add(t, delta.t)?;
        Ok(Self { r, t })
    }

    /// `self * other` (apply `other` first).
    pub fn compose(&self, tape: &mut Tape, other: &TapePose) -> Result<Self> {
        other.premultiply(tape, self)
    }

    /// Inverse transform `(R^T, -R^T t)`.
    pub fn inverse(&self, tape: &mut Tape) -> Result<Self> {
        let rt = tape.transpose(self.r)?;
        let t = tape.matmul(self.t, self.r)?;
        let t = tape.neg(t)?;
        Ok(Self { r: rt, t })
    }

    /// Applies the transform to row points `[n,3]`.
    pub fn transform(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let rt = tape.transpose(self.r)?;
        let y = tape.matmul(x, rt)?;
        tape.add(y, self.t)
    }

    pub fn value(&self, tape: &Tape) -> SE3Pose {
        let r = tape.value(self.r).data();
        let t = tape.value(self.t).data();
        SE3Pose {
            rotation: nalgebra::Matrix3::from_row_slice(r),
            translation: nalgebra::Vector3::new(t[0], t[1], t[2]),
        }
    }
}

/// Projects camera-frame row points `[n,3]` to pixels `[n,2]`. The second
/// value flags points in front of the camera.
pub fn project_points(tape: &mut Tape, k: &Intrinsics, x: Var) -> Result<(Var, Vec<f64>)> {
    let z = tape.slice(x, 1, 2, 3)?;
    let valid: Vec<f64> = tape.value(z).data().iter().map(|&z| if z > MIN_DEPTH { 1.0 } else { 0.0 }).collect();
    let z = tape.clamp(z, MIN_DEPTH, f64::INFINITY)?;
    let xy = tape.slice(x, 1, 0, 2)?;
    let n = tape.div(xy, z)?;
    let f = tape.constant(Tensor::new(&[1, 2], vec![k.fx, k.fy])?);
    let c = tape.constant(Tensor::new(&[1, 2], vec![k.cx, k.cy])?);
    let uv = tape.mul(n, f)?;
    Ok((tape.add(uv, c)?, valid))
}

/// Camera-frame points behind pixels `(u,v)` of `k` at the given inverse
/// depths (`[n,1]`).
pub fn backproject_points(tape: &mut Tape, k: &Intrinsics, pixels: &[[f64; 2]], inv_depth: Var) -> Result<Var> {
    let mut rays = Vec::with_capacity(pixels.len() * 3);
    for p in pixels {
        let r = k.ray(p[0], p[1]);
        rays.extend_from_slice(&[r.x, r.y, r.z]);
    }
    let rays = tape.constant(Tensor::new(&[pixels.len(), 3], rays)?);
    let depth = tape.pow(inv_depth, -1.0)?;
    tape.mul(rays, depth)
}

/// Result of warping a patch of view i into view j.
#[derive(Debug)]
pub struct Warp {
    /// Sampled features `[n,c]`, zero where masked.
    pub features: Var,
    /// Sample coordinates in view j, `[n,2]`.
    pub coords: Var,
    /// 1 for pixels that project in front of camera j and inside its map.
    pub mask: Vec<f64>,
    /// Camera-j points `[n,3]`.
    pub points: Var,
}

impl Warp {
    pub fn valid_fraction(&self) -> f64 {
        self.mask.iter().sum::<f64>() / self.mask.len().max(1) as f64
    }
}

/// Back-projects each pixel of `pixels` (view i) with its inverse depth,
/// moves it into view j through `p_ij`, projects and samples `f_j`
/// (`[h,w,c]`). `k_i` and `k_j` must describe the pixel grids of `pixels`
/// and `f_j`.
pub fn warp_patch(
    tape: &mut Tape,
    pixels: &[[f64; 2]],
    inv_depth: Var,
    k_i: &Intrinsics,
    k_j: &Intrinsics,
    p_ij: &TapePose,
    f_j: Var,
) -> Result<Warp> {
    warp_patch_windowed(tape, pixels, inv_depth, k_i, k_j, p_ij, f_j, None)
}

/// [`warp_patch`] that additionally masks samples whose view-j coordinate
/// falls outside `window = [x_lo, x_hi, y_lo, y_hi]` (inclusive).
#[allow(clippy::too_many_arguments)]
pub fn warp_patch_windowed(
    tape: &mut Tape,
    pixels: &[[f64; 2]],
    inv_depth: Var,
    k_i: &Intrinsics,
    k_j: &Intrinsics,
    p_ij: &TapePose,
    f_j: Var,
    window: Option<[f64; 4]>,
) -> Result<Warp> {
    for (n, p) in pixels.iter().enumerate() {
        if !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (k_i.width - 1) as f64 && p[1] <= (k_i.height - 1) as f64) {
            return Err(Error::Domain(format!("patch pixel {n} at ({}, {}) outside view i", p[0], p[1])));
        }
    }
    if let Some(bad) = tape.value(inv_depth).data().iter().position(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(Error::Domain(format!("inverse depth invalid at patch pixel {bad}")));
    }
    let x_i = backproject_points(tape, k_i, pixels, inv_depth)?;
    let x_j = p_ij.transform(tape, x_i)?;
    let (uv, front) = project_points(tape, k_j, x_j)?;
    // keep coordinates of points behind the camera finite and out of range
    let uv_safe = {
        let keep = tape.constant(Tensor::new(&[pixels.len(), 1], front.clone())?);
        let far = tape.constant(Tensor::new(
            &[pixels.len(), 1],
            front.iter().map(|&f| if f > 0.0 { 0.0 } else { -1e6 }).collect(),
        )?);
        let uv = tape.mul(uv, keep)?;
        tape.add(uv, far)?
    };
    let sampled = tape.bilinear_sample(f_j, uv_safe)?;
    let mut mask: Vec<f64> = front.iter().zip(sampled.mask.data()).map(|(a, b)| a * b).collect();
    if let Some([xl, xh, yl, yh]) = window {
        let c = tape.value(uv).data();
        for (n, m) in mask.iter_mut().enumerate() {
            let (x, y) = (c[2 * n], c[2 * n + 1]);
            if !(x >= xl && x <= xh && y >= yl && y <= yh) {
                *m = 0.0;
            }
        }
    }
    if mask.iter().all(|&m| m == 0.0) {
        return Err(Error::EmptyWarp);
    }
    let m = tape.constant(Tensor::new(&[pixels.len(), 1], mask.clone())?);
    let features = tape.mul(sampled.values, m)?;
    Ok(Warp { features, coords: uv, mask, points: x_j })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose::Twist;
    use nalgebra::{Vector3, Vector6};

    fn grid(w: usize, h: usize) -> Vec<[f64; 2]> {
        let mut v = Vec::new();
        for y in 0..h {
            for x in 0..w {
                v.push([x as f64 + 4.0, y as f64 + 4.0]);
            }
        }
        v
    }

    fn feature_map(h: usize, w: usize, c: usize) -> Tensor {
        Tensor::from_fn(&[h, w, c], |i| {
            let (ch, px) = (i % c, i / c);
            let (x, y) = ((px % w) as f64, (px / w) as f64);
            (0.3 * x + 0.1 * ch as f64).sin() + (0.2 * y - 0.05 * ch as f64).cos()
        })
    }

    #[test]
    fn identity_warp_returns_source_coordinates_and_features() {
        let k = Intrinsics::from_fov(24, 24, 60.0);
        let pix = grid(8, 8);
        let mut tape = Tape::new();
        let f = tape.constant(feature_map(24, 24, 3));
        let d = tape.constant(Tensor::from_fn(&[pix.len(), 1], |i| 0.1 + 0.01 * i as f64));
        let p = TapePose::identity(&mut tape).unwrap();
        let w = warp_patch(&mut tape, &pix, d, &k, &k, &p, f).unwrap();
        let coords = tape.value(w.coords).data();
        for (n, q) in pix.iter().enumerate() {
            assert!((coords[2 * n] - q[0]).abs() < 1e-12 && (coords[2 * n + 1] - q[1]).abs() < 1e-12);
        }
        let fm = tape.value(f).clone();
        let feats = tape.value(w.features).data();
        for (n, q) in pix.iter().enumerate() {
            let base = ((q[1] as usize) * 24 + q[0] as usize) * 3;
            for c in 0..3 {
                assert!((feats[3 * n + c] - fm.data()[base + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn doubled_depth_halves_translation_parallax() {
        let k = Intrinsics::from_fov(24, 24, 60.0);
        let pix = vec![[12.0, 10.0], [5.0, 17.0]];
        let shift = SE3Pose { rotation: nalgebra::Matrix3::identity(), translation: Vector3::new(0.1, -0.05, 0.0) };
        let mut disp = Vec::new();
        for inv in [0.25, 0.125] {
            let mut tape = Tape::new();
            let f = tape.constant(feature_map(24, 24, 1));
            let d = tape.constant(Tensor::full(&[2, 1], inv));
            let p = TapePose::constant(&mut tape, &shift).unwrap();
            let w = warp_patch(&mut tape, &pix, d, &k, &k, &p, f).unwrap();
            let c = tape.value(w.coords).data().to_vec();
            disp.push([c[0] - pix[0][0], c[1] - pix[0][1], c[2] - pix[1][0], c[3] - pix[1][1]]);
        }
        for i in 0..4 {
            assert!((disp[1][i] - 0.5 * disp[0][i]).abs() < 1e-6);
        }
    }

    #[test]
    fn fully_out_of_view_patch_is_empty() {
        let k = Intrinsics::from_fov(24, 24, 60.0);
        let pix = grid(2, 2);
        let mut tape = Tape::new();
        let f = tape.constant(feature_map(24, 24, 1));
        let d = tape.constant(Tensor::full(&[4, 1], 0.5));
        let away = SE3Pose::exp(&Twist(Vector6::new(0.0, 1.2, 0.0, 0.0, 0.0, 0.0)));
        let p = TapePose::constant(&mut tape, &away).unwrap();
        assert!(matches!(warp_patch(&mut tape, &pix, d, &k, &k, &p, f), Err(Error::EmptyWarp)));
    }

    #[test]
    fn tape_pose_matches_plain_algebra() {
        let a = SE3Pose::exp(&Twist(Vector6::new(0.1, 0.2, -0.3, 1.0, 0.5, -0.2)));
        let b = SE3Pose::exp(&Twist(Vector6::new(-0.4, 0.1, 0.2, 0.0, 0.3, 0.7)));
        let mut tape = Tape::new();
        let ta = TapePose::constant(&mut tape, &a).unwrap();
        let tb = TapePose::constant(&mut tape, &b).unwrap();
        let ab = ta.compose(&mut tape, &tb).unwrap();
        assert!(ab.value(&tape).max_abs_diff(&a.compose(&b)) < 1e-12);
        let inv = ta.inverse(&mut tape).unwrap();
        assert!(inv.value(&tape).max_abs_diff(&a.inverse()) < 1e-12);
        let xi = tape.constant(Tensor::new(&[1, 6], vec![0.1, 0.2, -0.3, 1.0, 0.5, -0.2]).unwrap());
        let e = TapePose::exp_batch(&mut tape, xi).unwrap();
        assert!(e[0].value(&tape).max_abs_diff(&a) < 1e-12);
    }
}
