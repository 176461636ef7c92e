//! Closed forms for the SE(3) exponential and logarithm with small-angle
//! series where the exact expressions lose precision.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

const SERIES_BELOW: f64 = 0.05;

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Coefficients of `R = I + A W + B W^2`, `V = I + B W + C W^2` and their
/// derivatives divided by theta.
#[derive(Clone, Copy, Debug)]
struct Coeffs {
    a: f64,
    b: f64,
    c: f64,
    ad: f64,
    bd: f64,
    cd: f64,
}

fn coeffs(theta: f64) -> Coeffs {
    let t2 = theta * theta;
    if theta < SERIES_BELOW {
        let t4 = t2 * t2;
        let t6 = t4 * t2;
        Coeffs {
            a: 1.0 - t2 / 6.0 + t4 / 120.0 - t6 / 5040.0,
            b: 0.5 - t2 / 24.0 + t4 / 720.0 - t6 / 40320.0,
            c: 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0 - t6 / 362880.0,
            ad: -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0 + t6 / 45360.0,
            bd: -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0 + t6 / 453600.0,
            cd: -1.0 / 60.0 + t2 / 1260.0 - t4 / 60480.0 + t6 / 4989600.0,
        }
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = t2 * theta;
        Coeffs {
            a: s / theta,
            b: (1.0 - c) / t2,
            c: (theta - s) / t3,
            ad: (theta * c - s) / t3,
            bd: (theta * s - 2.0 * (1.0 - c)) / (t2 * t2),
            cd: ((1.0 - c) * theta - 3.0 * (theta - s)) / (t3 * t2),
        }
    }
}

/// Rotation and translation of `exp([omega, v])`.
pub fn exp(omega: &Vector3<f64>, v: &Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let k = coeffs(omega.norm());
    let w = hat(omega);
    let w2 = w * w;
    let r = Matrix3::identity() + w * k.a + w2 * k.b;
    let vm = Matrix3::identity() + w * k.b + w2 * k.c;
    (r, vm * v)
}

/// `exp` of a twist in flat form, returning the 12 output values (row-major
/// rotation, then translation) and the 12x6 Jacobian with respect to the
/// twist coordinates.
pub fn exp_with_jacobian(xi: &[f64; 6]) -> ([f64; 12], [[f64; 6]; 12]) {
    let omega = Vector3::new(xi[0], xi[1], xi[2]);
    let v = Vector3::new(xi[3], xi[4], xi[5]);
    let k = coeffs(omega.norm());
    let w = hat(&omega);
    let w2 = w * w;
    let r = Matrix3::identity() + w * k.a + w2 * k.b;
    let vm = Matrix3::identity() + w * k.b + w2 * k.c;
    let t = vm * v;

    let mut out = [0.0; 12];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = r[(i, j)];
        }
        out[9 + i] = t[i];
    }

    let mut jac = [[0.0; 6]; 12];
    for d in 0..3 {
        let g = hat(&Vector3::ith(d, 1.0));
        let gw = g * w + w * g;
        let wd = omega[d];
        let dr = w * (k.ad * wd) + g * k.a + w2 * (k.bd * wd) + gw * k.b;
        let dv = w * (k.bd * wd) + g * k.b + w2 * (k.cd * wd) + gw * k.c;
        let dt = dv * v;
        for i in 0..3 {
            for j in 0..3 {
                jac[3 * i + j][d] = dr[(i, j)];
            }
            jac[9 + i][d] = dt[i];
        }
    }
    for d in 0..3 {
        for i in 0..3 {
            jac[9 + i][3 + d] = vm[(i, d)];
        }
    }
    (out, jac)
}

/// Axis-angle vector of a rotation matrix. Fails when the angle is within
/// `1e-6` of pi, where the axis sign is not recoverable stably.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let skew = vee(&(r - r.transpose())) * 0.5;
    let s = skew.norm();
    let theta = s.atan2(c);
    if theta >= std::f64::consts::PI - 1e-6 {
        return Err(Error::IllConditionedLog { angle: theta });
    }
    if theta < SERIES_BELOW {
        let t2 = theta * theta;
        let a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
        return Ok(skew / a);
    }
    if theta > 3.0 {
        // sin(theta) is tiny here; read the axis off the symmetric part.
        let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * c;
        let scale = 1.0 - c;
        let d = [sym[(0, 0)], sym[(1, 1)], sym[(2, 2)]];
        let k = (0..3).max_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
        let mut axis = Vector3::new(sym[(0, k)], sym[(1, k)], sym[(2, k)]) / scale;
        axis /= axis.norm();
        if axis.dot(&skew) < 0.0 {
            axis = -axis;
        }
        return Ok(axis * theta);
    }
    Ok(skew * (theta / s))
}

/// Inverse of the left Jacobian `V` for a given rotation vector.
pub fn v_inverse(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = hat(omega);
    let coef = if theta < SERIES_BELOW {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let k = coeffs(theta);
        (1.0 - k.a / (2.0 * k.b)) / (theta * theta)
    };
    Matrix3::identity() - w * 0.5 + w * w * coef
}
