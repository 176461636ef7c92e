use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3, Vector6};
use rand::Rng;

use super::lie;
use crate::error::{Error, Result};

/// Lie-algebra coordinates of a rigid motion: rotation part first, then
/// translation part.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Twist(Vector6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z))
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Twist(Vector6::from_column_slice(&s[..6]))
    }

    pub fn omega(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into()
    }

    pub fn v(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into()
    }

    pub fn as_array(&self) -> [f64; 6] {
        let mut a = [0.0; 6];
        a.copy_from_slice(self.0.as_slice());
        a
    }

    /// Each coordinate drawn uniformly from `[-eps, eps]`.
    pub fn uniform<R: Rng>(rng: &mut R, eps: f64) -> Self {
        let mut t = Vector6::zeros();
        if eps > 0.0 {
            for x in t.iter_mut() {
                *x = rng.gen_range(-eps..=eps);
            }
        }
        Twist(t)
    }
}

/// Rigid transform `x -> R x + t`. Camera poses map world points into the
/// camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SE3Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Validating constructor: the rotation must be orthonormal with
    /// determinant +1 to within `1e-6`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > 1e-6 || (det - 1.0).abs() > 1e-6 || !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::Domain(format!(
                "not a rigid transform (orthogonality error {ortho:.2e}, det {det:.6})"
            )));
        }
        Ok(Self { rotation, translation })
    }

    pub fn exp(xi: &Twist) -> Self {
        let (rotation, translation) = lie::exp(&xi.omega(), &xi.v());
        Self { rotation, translation }
    }

    pub fn log(&self) -> Result<Twist> {
        let omega = lie::so3_log(&self.rotation)?;
        let v = lie::v_inverse(&omega) * self.translation;
        Ok(Twist::new(omega, v))
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Pose {
        let rt = self.rotation.transpose();
        SE3Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Left retraction `exp(delta) * self`.
    pub fn retract(&self, delta: &Twist) -> SE3Pose {
        SE3Pose::exp(delta).compose(self)
    }

    /// Camera centre in world coordinates for a world-to-camera pose.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Geodesic rotation distance in radians.
    pub fn rotation_angle_to(&self, other: &SE3Pose) -> f64 {
        let r = self.rotation.transpose() * other.rotation;
        ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }

    /// Re-orthonormalises the rotation (polar projection via SVD).
    pub fn renormalized(&self) -> SE3Pose {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        SE3Pose { rotation: r, translation: self.translation }
    }

    /// 3x4 row-major `[R | t]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            for j in 0..3 {
                out[4 * i + j] = self.rotation[(i, j)];
            }
            out[4 * i + 3] = self.translation[i];
        }
        out
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::Domain(format!("pose needs 12 values, got {}", v.len())));
        }
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Self::new(r, Vector3::new(v[3], v[7], v[11]))
    }

    pub fn max_abs_diff(&self, other: &SE3Pose) -> f64 {
        (self.rotation - other.rotation)
            .abs()
            .max()
            .max((self.translation - other.translation).abs().max())
    }
}

/// `P_ij = P_j * P_i^-1`, mapping camera-i coordinates to camera-j coordinates.
pub fn relative_pose(p_i: &SE3Pose, p_j: &SE3Pose) -> SE3Pose {
    p_j.compose(&p_i.inverse())
}

/// Pose text format: one camera per line, twelve whitespace-separated
/// numbers giving the row-major 3x4 matrix `[R | t]`. Blank lines and lines
/// starting with `#` are ignored.
pub fn format_poses(poses: &[SE3Pose]) -> String {
    let mut s = String::new();
    for p in poses {
        let row: Vec<String> = p.to_row_major().iter().map(|v| format!("{v:.17e}")).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

pub fn parse_poses(text: &str, source_name: &str) -> Result<Vec<SE3Pose>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        let vals = vals.map_err(|e| Error::parse(source_name, ln + 1, e.to_string()))?;
        let p = SE3Pose::from_row_major(&vals).map_err(|e| Error::parse(source_name, ln + 1, e.to_string()))?;
        out.push(p);
    }
    Ok(out)
}

pub fn write_poses(path: &Path, poses: &[SE3Pose]) -> Result<()> {
    std::fs::write(path, format_poses(poses)).map_err(|e| Error::io(path, e))
}

pub fn read_poses(path: &Path) -> Result<Vec<SE3Pose>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text, &path.display().to_string())
}
