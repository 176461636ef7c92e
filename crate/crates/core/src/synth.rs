//! Procedural scenes made of textured rectangles, rendered analytically so
//! that images, depths and poses are exact.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{DepthMap, Intrinsics, SE3Pose, Twist};
use crate::imageio::Image;
use crate::error::{Error, Result};

/// Scene generation parameters. Serialised as flat `key value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    /// Number of planes including the back wall, 1 to 4.
    pub planes: usize,
    pub near: f64,
    pub far: f64,
    pub octaves: usize,
    /// Lattice spacing of the coarsest noise octave, scene units.
    pub texture_scale: f64,
    /// Distance from the cameras to the look-at point.
    pub radius: f64,
    /// Depth of the back wall behind the look-at point.
    pub wall_distance: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { seed: 0, planes: 4, near: 2.0, far: 12.0, octaves: 3, texture_scale: 0.8, radius: 5.0, wall_distance: 3.0 }
    }
}

impl SceneConfig {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "planes {}", self.planes);
        let _ = writeln!(s, "near {}", self.near);
        let _ = writeln!(s, "far {}", self.far);
        let _ = writeln!(s, "octaves {}", self.octaves);
        let _ = writeln!(s, "texture_scale {}", self.texture_scale);
        let _ = writeln!(s, "radius {}", self.radius);
        let _ = writeln!(s, "wall_distance {}", self.wall_distance);
        s
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut c = Self::default();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::parse(source_name, ln + 1, "expected 'key value'"))?;
            let v = v.trim();
            let bad = |_| Error::parse(source_name, ln + 1, format!("bad value for {k}: '{v}'"));
            match k {
                "seed" => c.seed = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "planes" => c.planes = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "octaves" => c.octaves = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "near" => c.near = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "far" => c.far = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "texture_scale" => c.texture_scale = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "radius" => c.radius = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "wall_distance" => c.wall_distance = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                _ => return Err(Error::parse(source_name, ln + 1, format!("unknown key '{k}'"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Config(format!("need 0 < near < far, got {} / {}", self.near, self.far)));
        }
        if !(1..=4).contains(&self.planes) {
            return Err(Error::Config(format!("planes must be 1..=4, got {}", self.planes)));
        }
        if self.octaves == 0 || self.texture_scale <= 0.0 || self.radius <= 0.0 {
            return Err(Error::Config("octaves, texture_scale and radius must be positive".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Multi-octave value noise with quintic interpolation.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueNoise {
    pub seed: u64,
    pub octaves: usize,
    pub scale: f64,
}

fn lattice(seed: u64, i: i64, j: i64) -> f64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [i as u64, j as u64] {
        h ^= v.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = h.rotate_left(27).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn quintic(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

impl ValueNoise {
    fn octave(&self, k: usize, p: Vector2<f64>) -> f64 {
        let s = p / (self.scale / (1u64 << k) as f64);
        let (i, j) = (s.x.floor(), s.y.floor());
        let (fx, fy) = (quintic(s.x - i), quintic(s.y - j));
        let (i, j) = (i as i64, j as i64);
        let seed = self.seed.wrapping_add(k as u64 * 7919);
        let a = lattice(seed, i, j);
        let b = lattice(seed, i + 1, j);
        let c = lattice(seed, i, j + 1);
        let d = lattice(seed, i + 1, j + 1);
        let top = a + (b - a) * fx;
        let bot = c + (d - c) * fx;
        top + (bot - top) * fy
    }

    /// Value in `[0,1]`.
    pub fn eval(&self, p: Vector2<f64>) -> f64 {
        let (mut sum, mut norm, mut amp) = (0.0, 0.0, 1.0);
        for k in 0..self.octaves {
            sum += amp * self.octave(k, p);
            norm += amp;
            amp *= 0.55;
        }
        sum / norm
    }
}

/// A finite textured rectangle `origin + a*u + b*v`, `|a| <= half.x`,
/// `|b| <= half.y`. Visible from both sides.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub origin: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub half: Vector2<f64>,
    pub colors: [[f64; 3]; 3],
    pub texture: ValueNoise,
    pub tint: ValueNoise,
}

impl Plane {
    pub fn normal(&self) -> Vector3<f64> {
        self.u.cross(&self.v).normalize()
    }

    /// Ray parameter and in-plane coordinates of the hit, if any.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector2<f64>)> {
        let n = self.normal();
        let den = n.dot(d);
        if den.abs() < 1e-12 {
            return None;
        }
        let s = n.dot(&(self.origin - o)) / den;
        if s <= 0.0 {
            return None;
        }
        let q = o + d * s - self.origin;
        let ab = Vector2::new(q.dot(&self.u), q.dot(&self.v));
        (ab.x.abs() <= self.half.x && ab.y.abs() <= self.half.y).then_some((s, ab))
    }

    pub fn shade(&self, ab: Vector2<f64>) -> [f64; 3] {
        let n = self.texture.eval(ab);
        let t = self.tint.eval(ab + Vector2::new(17.3, -4.1));
        let [c0, c1, c2] = self.colors;
        let mut out = [0.0; 3];
        for k in 0..3 {
            let base = c0[k] + (c1[k] - c0[k]) * n;
            out[k] = (base + 0.35 * (t - 0.5) * c2[k]).clamp(0.0, 1.0);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub planes: Vec<Plane>,
    pub look_at: Vector3<f64>,
}

/// Trajectory shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryStyle {
    /// Forward-facing arc of +-15 degrees around the look-at point.
    Arc,
    /// Full circle around the look-at point.
    Orbit,
}

/// Ground-truth render of one view.
#[derive(Clone, Debug)]
pub struct GtView {
    pub image: Image,
    /// Camera-frame depth per pixel, infinite on background.
    pub depth: Vec<f64>,
    pub inv_depth: DepthMap,
    pub background: Vec<bool>,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

fn noise(rng: &mut ChaCha8Rng, octaves: usize, scale: f64) -> ValueNoise {
    ValueNoise { seed: rng.gen(), octaves, scale }
}

fn textured(rng: &mut ChaCha8Rng, cfg: &SceneConfig, origin: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, half: Vector2<f64>) -> Plane {
    let mut colors = [random_color(rng), random_color(rng), random_color(rng)];
    // keep contrast between the two main colours
    while (0..3).map(|k| (colors[0][k] - colors[1][k]).abs()).sum::<f64>() < 0.9 {
        colors[1] = random_color(rng);
    }
    Plane {
        origin,
        u,
        v,
        half,
        colors,
        texture: noise(rng, cfg.octaves, cfg.texture_scale),
        tint: noise(rng, 2, cfg.texture_scale * 2.0),
    }
}

/// Builds a scene: a wide back wall plus up to three tilted rectangles
/// between the cameras and the wall.
pub fn make_scene(seed: u64, config: &SceneConfig) -> Result<SyntheticScene> {
    config.validate()?;
    let mut cfg = config.clone();
    cfg.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5CE4E);
    let look_at = Vector3::zeros();
    let mut planes = Vec::with_capacity(cfg.planes);
    let wall_half = 4.0 * (cfg.radius + cfg.wall_distance);
    planes.push(textured(
        &mut rng,
        &cfg,
        Vector3::new(0.0, 0.0, cfg.wall_distance),
        Vector3::x(),
        Vector3::y(),
        Vector2::new(wall_half, wall_half),
    ));
    for _ in 1..cfg.planes {
        let yaw: f64 = rng.gen_range(-0.6..0.6);
        let pitch: f64 = rng.gen_range(-0.5..0.5);
        let u = Vector3::new(yaw.cos(), 0.0, yaw.sin());
        let v0 = Vector3::new(0.0, pitch.cos(), pitch.sin());
        let v = (v0 - u * u.dot(&v0)).normalize();
        let origin = Vector3::new(rng.gen_range(-1.2..1.2), rng.gen_range(-1.0..1.0), rng.gen_range(-1.5..1.5));
        let half = Vector2::new(rng.gen_range(0.5..1.2), rng.gen_range(0.5..1.2));
        planes.push(textured(&mut rng, &cfg, origin, u, v, half));
    }
    Ok(SyntheticScene { config: cfg, planes, look_at })
}

/// Scene with only a fronto-parallel wall at depth `radius + wall_distance`
/// from cameras looking down +z from `z = -radius`.
pub fn make_plane_scene(seed: u64, config: &SceneConfig) -> Result<SyntheticScene> {
    let mut cfg = config.clone();
    cfg.planes = 1;
    make_scene(seed, &cfg)
}

/// World-to-camera pose of a camera at `center` looking at `target`, with
/// image y pointing along world +y.
pub fn look_at(center: Vector3<f64>, target: Vector3<f64>) -> SE3Pose {
    let z = (target - center).normalize();
    let down = Vector3::y();
    let x = down.cross(&z).normalize();
    let y = z.cross(&x);
    let r = nalgebra::Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    SE3Pose { rotation: r, translation: -(r * center) }
}

impl SyntheticScene {
    pub fn near(&self) -> f64 {
        self.config.near
    }

    pub fn far(&self) -> f64 {
        self.config.far
    }

    /// Nearest hit along a world ray: ray parameter, plane index, colour.
    pub fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize, [f64; 3])> {
        let mut best: Option<(f64, usize, [f64; 3])> = None;
        for (k, p) in self.planes.iter().enumerate() {
            if let Some((s, ab)) = p.intersect(o, d) {
                if best.map_or(true, |b| s < b.0) {
                    best = Some((s, k, p.shade(ab)));
                }
            }
        }
        best
    }

    /// Analytic render: per-pixel ray/rectangle intersection, nearest hit.
    pub fn gt_render(&self, pose: &SE3Pose, k: &Intrinsics) -> Result<GtView> {
        let c = pose.center();
        for (i, p) in self.planes.iter().enumerate() {
            let q = c - p.origin;
            let n = p.normal();
            if n.dot(&q).abs() < 1e-9 && q.dot(&p.u).abs() <= p.half.x && q.dot(&p.v).abs() <= p.half.y {
                return Err(Error::DegenerateView(format!("camera centre lies on plane {i}")));
            }
        }
        let rt = pose.rotation.transpose();
        let (w, h) = (k.width, k.height);
        let mut image = Image::new(w, h);
        let mut depth = vec![f64::INFINITY; w * h];
        let mut background = vec![true; w * h];
        for y in 0..h {
            for x in 0..w {
                // ray with unit camera-z so the ray parameter is the depth
                let d = rt * k.ray(x as f64, y as f64);
                if let Some((s, _, col)) = self.trace(&c, &d) {
                    image.set(x, y, col);
                    depth[y * w + x] = s;
                    background[y * w + x] = false;
                }
            }
        }
        let inv_depth = DepthMap::from_depth(w, h, &depth);
        Ok(GtView { image, depth, inv_depth, background })
    }

    /// Colour seen through a continuous pixel position, `None` on background.
    pub fn render_pixel(&self, pose: &SE3Pose, k: &Intrinsics, u: f64, v: f64) -> Option<[f64; 3]> {
        let d = pose.rotation.transpose() * k.ray(u, v);
        self.trace(&pose.center(), &d).map(|h| h.2)
    }

    /// Camera poses along a trajectory around the look-at point.
    pub fn sample_trajectory(&self, n: usize, style: TrajectoryStyle) -> Result<Vec<SE3Pose>> {
        if n < 2 {
            return Err(Error::Domain(format!("trajectory needs at least 2 views, got {n}")));
        }
        let r = self.config.radius;
        let mut poses = Vec::with_capacity(n);
        for i in 0..n {
            let s = i as f64 / (n - 1) as f64;
            let (angle, bob) = match style {
                TrajectoryStyle::Arc => ((-15.0 + 30.0 * s).to_radians(), 0.2 * r * (std::f64::consts::TAU * s).sin()),
                TrajectoryStyle::Orbit => (std::f64::consts::TAU * i as f64 / n as f64, 0.0),
            };
            let center = self.look_at + Vector3::new(r * angle.sin(), bob, -r * angle.cos());
            poses.push(look_at(center, self.look_at));
        }
        Ok(poses)
    }
}

/// Largest distance between two camera centres.
pub fn scene_diameter(poses: &[SE3Pose]) -> f64 {
    let c: Vec<_> = poses.iter().map(SE3Pose::center).collect();
    let mut d: f64 = 0.0;
    for i in 0..c.len() {
        for j in i + 1..c.len() {
            d = d.max((c[i] - c[j]).norm());
        }
    }
    d
}

/// Random twist-based perturbation: rotation by an angle uniform in
/// `[0, rot_deg]` about a uniform axis, camera-centre displacement uniform
/// in `[0, trans_frac * diameter]` along a uniform direction.
pub fn perturb_poses(poses: &[SE3Pose], rot_deg: f64, trans_frac: f64, seed: u64) -> Vec<SE3Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let diameter = scene_diameter(poses);
    poses
        .iter()
        .map(|p| {
            let axis = random_unit(&mut rng);
            let angle = if rot_deg > 0.0 { rng.gen_range(0.0..=rot_deg).to_radians() } else { 0.0 };
            let dir = random_unit(&mut rng);
            let mag = if trans_frac > 0.0 { rng.gen_range(0.0..=trans_frac * diameter) } else { 0.0 };
            let rot = SE3Pose::exp(&Twist::new(axis * angle, Vector3::zeros()));
            // rotate about the camera centre, then move the centre by `mag`
            let r = rot.rotation * p.rotation;
            let c = p.center() + dir * mag;
            SE3Pose { rotation: r, translation: -(r * c) }
        })
        .collect()
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Fraction of view-i pixels whose surface point is visible in view j
/// (inside the image and not occluded).
pub fn covisibility(scene: &SyntheticScene, p_i: &SE3Pose, p_j: &SE3Pose, k: &Intrinsics, view_i: &GtView, step: usize) -> f64 {
    let rt = p_i.rotation.transpose();
    let c_j = p_j.center();
    let (mut seen, mut total) = (0usize, 0usize);
    for y in (0..k.height).step_by(step) {
        for x in (0..k.width).step_by(step) {
            let z = view_i.depth[y * k.width + x];
            if !z.is_finite() {
                continue;
            }
            total += 1;
            let xw = p_i.center() + rt * k.ray(x as f64, y as f64) * z;
            let xc = p_j.transform(&xw);
            let Some(px) = k.project_point(&xc) else { continue };
            if !k.contains(&px) {
                continue;
            }
            let d = xw - c_j;
            let dist = d.norm();
            let hit = scene.trace(&c_j, &(d / dist));
            if hit.map_or(false, |(s, _, _)| s > dist - 1e-6 * dist.max(1.0)) {
                seen += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        seen as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> Intrinsics {
        Intrinsics::from_fov(96, 96, 60.0)
    }

    #[test]
    fn scenes_are_deterministic() {
        let a = make_scene(5, &SceneConfig::default()).unwrap();
        let b = make_scene(5, &SceneConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = make_scene(6, &SceneConfig::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn fronto_parallel_plane_has_constant_depth() {
        let cfg = SceneConfig::default();
        let scene = make_plane_scene(1, &cfg).unwrap();
        let pose = look_at(Vector3::new(0.4, -0.2, -cfg.radius), Vector3::new(0.4, -0.2, 0.0));
        let v = scene.gt_render(&pose, &k()).unwrap();
        let d = cfg.radius + cfg.wall_distance;
        assert!(v.depth.iter().all(|z| (z - d).abs() < 1e-12));
        assert!(v.background.iter().all(|b| !b));
    }

    #[test]
    fn plane_views_are_related_by_the_induced_homography() {
        let cfg = SceneConfig::default();
        let scene = make_plane_scene(7, &cfg).unwrap();
        let k = k();
        let p_i = look_at(Vector3::new(0.0, 0.0, -cfg.radius), Vector3::zeros());
        let p_j = look_at(Vector3::new(0.6, 0.3, -cfg.radius + 0.4), Vector3::new(0.2, 0.0, 0.0));
        let rel = crate::geometry::relative_pose(&p_i, &p_j);
        // wall in camera i: n . X = d with n = +z
        let n = Vector3::z();
        let d = cfg.radius + cfg.wall_distance;
        let h = k.matrix() * (rel.rotation + rel.translation * n.transpose() / d) * k.matrix().try_inverse().unwrap();
        let view_i = scene.gt_render(&p_i, &k).unwrap();
        let (mut worst, mut count) = (0.0f64, 0);
        for y in 0..k.height {
            for x in 0..k.width {
                let q = h * Vector3::new(x as f64, y as f64, 1.0);
                let (u, v) = (q.x / q.z, q.y / q.z);
                if !k.contains(&Vector2::new(u, v)) {
                    continue;
                }
                let c = scene.render_pixel(&p_j, &k, u, v).unwrap();
                let a = view_i.image.get(x, y);
                worst = (0..3).map(|c_| (a[c_] - c[c_]).abs()).fold(worst, f64::max);
                count += 1;
            }
        }
        assert!(count > 4000);
        assert!(worst <= 1e-3, "{worst}");
    }

    #[test]
    fn rendered_depth_agrees_with_warp_patch() {
        use crate::autodiff::{Tape, Tensor};
        use crate::geometry::{relative_pose, warp_patch, TapePose};
        let scene = make_scene(3, &SceneConfig::default()).unwrap();
        let k = k();
        let poses = scene.sample_trajectory(12, TrajectoryStyle::Arc).unwrap();
        let (vi, vj) = (scene.gt_render(&poses[3], &k).unwrap(), scene.gt_render(&poses[4], &k).unwrap());
        let mut pixels = Vec::new();
        let mut inv = Vec::new();
        for y in (4..92).step_by(6) {
            for x in (4..92).step_by(6) {
                if let Some(d) = vi.inv_depth.get(x, y) {
                    pixels.push([x as f64, y as f64]);
                    inv.push(d);
                }
            }
        }
        let mut tape = Tape::new();
        let id = tape.constant(Tensor::new(&[inv.len(), 1], inv).unwrap());
        let p_ij = TapePose::constant(&mut tape, &relative_pose(&poses[3], &poses[4])).unwrap();
        let fj = tape.constant(vj.image.to_tensor());
        let w = warp_patch(&mut tape, &pixels, id, &k, &k, &p_ij, fj).unwrap();
        let uv = tape.value(w.coords).clone();
        let pts = tape.value(w.points).clone();
        let mut checked = 0;
        for n in 0..pixels.len() {
            if w.mask[n] == 0.0 {
                continue;
            }
            let (u, v) = (uv.data()[2 * n], uv.data()[2 * n + 1]);
            let z = pts.data()[3 * n + 2];
            // the surface point must be the first hit seen from view j
            let ray = poses[4].rotation.transpose() * k.ray(u, v);
            let hit = scene.trace(&poses[4].center(), &ray);
            if let Some((s, _, _)) = hit {
                if (s - z).abs() < 1e-6 * z {
                    checked += 1;
                    // round trip back into view i to sub-pixel accuracy
                    let back = crate::geometry::project(&k, &poses[3], &(poses[4].center() + ray * s));
                    assert!((back.pixel.x - pixels[n][0]).abs() < 1e-6 && (back.pixel.y - pixels[n][1]).abs() < 1e-6);
                }
            }
        }
        assert!(checked as f64 >= 0.5 * pixels.len() as f64, "{checked}/{}", pixels.len());
    }

    #[test]
    fn camera_on_a_plane_is_degenerate() {
        let cfg = SceneConfig::default();
        let scene = make_plane_scene(1, &cfg).unwrap();
        let pose = look_at(Vector3::new(0.0, 0.0, cfg.wall_distance), Vector3::new(1.0, 0.0, cfg.wall_distance));
        assert!(matches!(scene.gt_render(&pose, &k()), Err(Error::DegenerateView(_))));
    }

    #[test]
    fn scene_spec_round_trips_and_validates() {
        let cfg = SceneConfig { seed: 9, planes: 2, octaves: 3, ..Default::default() };
        assert_eq!(SceneConfig::parse(&cfg.to_text(), "mem").unwrap(), cfg);
        assert!(SceneConfig::parse("near 3\nfar 2\n", "mem").is_err());
        assert!(SceneConfig::parse("colour red\n", "mem").is_err());
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let scene = make_scene(0, &SceneConfig::default()).unwrap();
        let poses = scene.sample_trajectory(6, TrajectoryStyle::Arc).unwrap();
        let same = perturb_poses(&poses, 0.0, 0.0, 3);
        for (a, b) in poses.iter().zip(&same) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn rotation_perturbation_is_bounded_and_reaches_its_cap() {
        let scene = make_scene(0, &SceneConfig::default()).unwrap();
        let poses = scene.sample_trajectory(2, TrajectoryStyle::Arc).unwrap();
        let mut worst: f64 = 0.0;
        for seed in 0..1000 {
            let p = perturb_poses(&poses[..1], 5.0, 0.05, seed);
            let a = poses[0].rotation_angle_to(&p[0]).to_degrees();
            assert!(a <= 5.0 + 1e-9);
            worst = worst.max(a);
        }
        assert!(worst > 4.95, "{worst}");
    }

    #[test]
    fn arc_views_overlap() {
        let scene = make_scene(2, &SceneConfig::default()).unwrap();
        let k = k();
        let poses = scene.sample_trajectory(12, TrajectoryStyle::Arc).unwrap();
        for i in 0..11 {
            let v = scene.gt_render(&poses[i], &k).unwrap();
            let c = covisibility(&scene, &poses[i], &poses[i + 1], &k, &v, 4);
            assert!(c >= 0.6, "views {i},{}: {c}", i + 1);
        }
    }

    #[test]
    fn every_view_sees_most_of_some_primitive() {
        let scene = make_scene(4, &SceneConfig::default()).unwrap();
        let k = k();
        for pose in scene.sample_trajectory(12, TrajectoryStyle::Arc).unwrap() {
            let v = scene.gt_render(&pose, &k).unwrap();
            let fg = v.background.iter().filter(|b| !**b).count() as f64 / v.background.len() as f64;
            assert!(fg >= 0.5);
        }
    }

    #[test]
    fn texture_has_energy_above_one_eighth_cycle_per_pixel() {
        use rustfft::{num_complex::Complex, FftPlanner};
        let cfg = SceneConfig::default();
        let scene = make_plane_scene(3, &cfg).unwrap();
        let kk = Intrinsics::from_fov(64, 64, 60.0);
        let pose = look_at(Vector3::new(0.0, 0.0, -cfg.radius), Vector3::zeros());
        let g = scene.gt_render(&pose, &kk).unwrap().image.gray();
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        let n = 64;
        let mut rows: Vec<Vec<Complex<f64>>> =
            (0..n).map(|y| (0..n).map(|x| Complex::new(g[y * n + x] - mean, 0.0)).collect()).collect();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        for r in rows.iter_mut() {
            fft.process(r);
        }
        for x in 0..n {
            let mut col: Vec<_> = (0..n).map(|y| rows[y][x]).collect();
            fft.process(&mut col);
            for y in 0..n {
                rows[y][x] = col[y];
            }
        }
        let (mut high, mut total) = (0.0, 0.0);
        for (y, row) in rows.iter().enumerate() {
            for (x, v) in row.iter().enumerate() {
                let fx = (x.min(n - x)) as f64 / n as f64;
                let fy = (y.min(n - y)) as f64 / n as f64;
                let e = v.norm_sqr();
                total += e;
                if fx.hypot(fy) > 0.125 {
                    high += e;
                }
            }
        }
        assert!(high / total > 1e-3, "high-frequency fraction {}", high / total);
    }
}
