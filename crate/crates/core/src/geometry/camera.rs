use nalgebra::{Matrix2x6, Matrix3, Vector2, Vector3};

use super::pose::SE3Pose;
use crate::error::{Error, Result};

/// Smallest camera-frame depth accepted as a valid projection.
pub const MIN_DEPTH: f64 = 1e-6;

/// Pinhole intrinsics. Pixel centres sit on integer coordinates with the
/// origin at the top-left texel; the camera looks down +z, x to the right,
/// y down.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Domain(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        if !(cx >= 0.0 && cy >= 0.0 && cx <= width as f64 && cy <= height as f64) {
            return Err(Error::Domain(format!("principal point ({cx}, {cy}) outside {width}x{height}")));
        }
        Ok(k)
    }

    /// Square image with the principal point at the centre and a horizontal
    /// field of view in degrees.
    pub fn from_fov(width: usize, height: usize, fov_deg: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        Self { fx: f, fy: f, cx: (width as f64 - 1.0) * 0.5, cy: (height as f64 - 1.0) * 0.5, width, height }
    }

    /// Intrinsics of a map subsampled by `stride` where texel `x` of the map
    /// sits at image coordinate `stride * x`.
    pub fn downscaled(&self, stride: usize) -> Self {
        let s = stride as f64;
        Self {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            width: self.width.div_ceil(stride),
            height: self.height.div_ceil(stride),
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Unit-depth ray `((u-cx)/fx, (v-cy)/fy, 1)` through a pixel.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Camera-frame point at depth `z` behind pixel `(u, v)`.
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        self.ray(u, v) * z
    }

    /// Pixel of a camera-frame point, `None` when it is not in front of the camera.
    pub fn project_point(&self, x: &Vector3<f64>) -> Option<Vector2<f64>> {
        if x.z <= MIN_DEPTH {
            return None;
        }
        Some(Vector2::new(self.fx * x.x / x.z + self.cx, self.fy * x.y / x.z + self.cy))
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64
    }
}

/// Projection of a point of camera i into camera j.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    /// Point in camera-j coordinates.
    pub point: Vector3<f64>,
    pub valid: bool,
}

/// Projects camera-i point `x` into view j through `p_ij`.
pub fn project(k: &Intrinsics, p_ij: &SE3Pose, x: &Vector3<f64>) -> Projection {
    let point = p_ij.transform(x);
    match k.project_point(&point) {
        Some(pixel) => Projection { pixel, point, valid: true },
        None => Projection { pixel: Vector2::zeros(), point, valid: false },
    }
}

/// Jacobian of the projected pixel with respect to a left twist
/// perturbation `exp(d) * p_ij` at `d = 0`.
pub fn project_jacobian(k: &Intrinsics, point: &Vector3<f64>) -> Matrix2x6<f64> {
    let (x, y, z) = (point.x, point.y, point.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    // du/dX' * [ -[X']x | I ]
    let (a, b) = (k.fx * iz, -k.fx * x * iz2);
    let (c, d) = (k.fy * iz, -k.fy * y * iz2);
    Matrix2x6::new(
        b * y,
        a * z - b * x,
        -a * y,
        a,
        0.0,
        b,
        -c * z + d * y,
        -d * x,
        c * x,
        0.0,
        c,
        d,
    )
}

/// Inverse-depth map with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub inv_depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn constant(width: usize, height: usize, inv_depth: f64) -> Self {
        Self { width, height, inv_depth: vec![inv_depth; width * height], valid: vec![true; width * height] }
    }

    /// Builds from metric depth; non-finite or non-positive depths become invalid.
    pub fn from_depth(width: usize, height: usize, depth: &[f64]) -> Self {
        let mut inv_depth = vec![0.0; depth.len()];
        let mut valid = vec![false; depth.len()];
        for (i, &z) in depth.iter().enumerate() {
            if z.is_finite() && z > 0.0 {
                inv_depth[i] = 1.0 / z;
                valid[i] = true;
            }
        }
        Self { width, height, inv_depth, valid }
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.inv_depth[i])
    }

    pub fn check(&self) -> Result<()> {
        for (i, (&d, &ok)) in self.inv_depth.iter().zip(&self.valid).enumerate() {
            if ok && !(d.is_finite() && d > 0.0) {
                return Err(Error::Domain(format!("inverse depth {d} at {i} marked valid")));
            }
        }
        Ok(())
    }

    /// Bilinear lookup of inverse depth, requiring all four texels valid.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64) {
            return None;
        }
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let mut acc = 0.0;
        for (dx, dy, w) in [(0, 0, (1.0 - fx) * (1.0 - fy)), (1, 0, fx * (1.0 - fy)), (0, 1, (1.0 - fx) * fy), (1, 1, fx * fy)] {
            acc += w * self.get(x0 + dx, y0 + dy)?;
        }
        Some(acc)
    }
}
