//! Generalizable renderer: a small feature pyramid per source image,
//! per-sample aggregation across source views, density/colour heads and
//! quadrature volume rendering.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{project_points, Intrinsics, TapePose};
use crate::nn::{Bound, Conv, Group, Linear, ParamStore};

/// Channel widths of the three pyramid levels.
pub const CHANNELS: [usize; 3] = [16, 32, 64];
/// Image-pixel stride of each pyramid level.
pub const STRIDES: [usize; 3] = [2, 4, 8];
/// Hidden width of the aggregated feature.
pub const AGG_WIDTH: usize = 32;
/// Level sampled by the renderer alongside raw colour.
pub const RENDER_LEVEL: usize = 0;

/// Per-level feature maps of one image, each `[h, w, c]`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub source: usize,
    /// Image size after bottom/right padding to a multiple of 8.
    pub padded: (usize, usize),
}

impl FeaturePyramid {
    pub fn level(&self, l: usize) -> Var {
        self.levels[l]
    }
}

/// Feature pyramid network: three stride-2 3x3 convolutions bottom-up,
/// then top-down merges of upsampled coarser maps with 1x1 lateral
/// projections.
#[derive(Clone, Debug)]
pub struct Fpn {
    pub down: [Conv; 3],
    pub lateral: [Conv; 2],
    pub top: [Conv; 2],
}

impl Fpn {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let g = Group::Features;
        let [c0, c1, c2] = CHANNELS;
        Self {
            down: [
                Conv::new(store, rng, "fpn.down0", g, 3, 3, c0, 2),
                Conv::new(store, rng, "fpn.down1", g, 3, c0, c1, 2),
                Conv::new(store, rng, "fpn.down2", g, 3, c1, c2, 2),
            ],
            lateral: [
                Conv::new(store, rng, "fpn.lat0", g, 1, c0, c0, 1),
                Conv::new(store, rng, "fpn.lat1", g, 1, c1, c1, 1),
            ],
            top: [
                Conv::new(store, rng, "fpn.top0", g, 3, c1, c0, 1),
                Conv::new(store, rng, "fpn.top1", g, 3, c2, c1, 1),
            ],
        }
    }

    /// Runs the pyramid on an `[h, w, 3]` image. Sizes not divisible by 8
    /// are padded by edge replication with a warning.
    pub fn extract(&self, tape: &mut Tape, p: &Bound, image: Var, source: usize) -> Result<FeaturePyramid> {
        let s = tape.shape(image).to_vec();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Shape(format!("extract_pyramid: expected [h,w,3], got {s:?}")));
        }
        let (h, w) = (s[0], s[1]);
        let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
        let mut x = image;
        if (ph, pw) != (h, w) {
            log::warn!("extract_pyramid: padding {w}x{h} image to {pw}x{ph}");
            x = pad_edge(tape, x, 0, ph - h)?;
            x = pad_edge(tape, x, 1, pw - w)?;
        }
        let x = tape.reshape(x, &[1, ph, pw, 3])?;
        let mut c = Vec::with_capacity(3);
        let mut cur = x;
        for conv in &self.down {
            let y = conv.forward(tape, p, cur)?;
            cur = tape.relu(y)?;
            c.push(cur);
        }
        let p2 = c[2];
        let p1 = self.merge(tape, p, c[1], p2, 1)?;
        let p0 = self.merge(tape, p, c[0], p1, 0)?;
        let mut levels = Vec::with_capacity(3);
        for (l, v) in [p0, p1, p2].into_iter().enumerate() {
            let (lh, lw) = (ph / STRIDES[l], pw / STRIDES[l]);
            levels.push(tape.reshape(v, &[lh, lw, CHANNELS[l]])?);
        }
        Ok(FeaturePyramid { levels, source, padded: (pw, ph) })
    }

    fn merge(&self, tape: &mut Tape, p: &Bound, skip: Var, coarse: Var, l: usize) -> Result<Var> {
        let lat = self.lateral[l].forward(tape, p, skip)?;
        let t = self.top[l].forward(tape, p, coarse)?;
        let up = tape.upsample2x(t)?;
        let s = tape.add(lat, up)?;
        tape.relu(s)
    }
}

fn pad_edge(tape: &mut Tape, x: Var, axis: usize, extra: usize) -> Result<Var> {
    if extra == 0 {
        return Ok(x);
    }
    let n = tape.shape(x)[axis];
    let edge = tape.slice(x, axis, n - 1, n)?;
    let mut parts = vec![x];
    parts.extend(std::iter::repeat(edge).take(extra));
    tape.concat(&parts, axis)
}

fn conv_taint(input: &[bool], k: usize, stride: usize) -> Vec<bool> {
    let n = input.len() as isize;
    let pad = (k / 2) as isize;
    let out = (input.len() + 2 * (k / 2) - k) / stride + 1;
    (0..out)
        .map(|o| {
            (0..k as isize).any(|t| {
                let i = stride as isize * o as isize - pad + t;
                i < 0 || i >= n || input[i as usize]
            })
        })
        .collect()
}

fn up_taint(input: &[bool]) -> Vec<bool> {
    let n = input.len();
    (0..2 * n)
        .map(|o| {
            let i = o / 2;
            if o % 2 == 0 {
                input[i]
            } else {
                input[i] || i + 1 >= n || input[i + 1]
            }
        })
        .collect()
}

fn or(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(x, y)| *x || *y).collect()
}

/// Inclusive texel range along one axis of level `l` whose receptive field
/// never touches zero padding or the clamped upsampling edge, for an image
/// of `n` pixels (already a multiple of 8). `None` if no texel is clean.
pub fn interior_window(n: usize, l: usize) -> Option<(usize, usize)> {
    let img = vec![false; n];
    let c0 = conv_taint(&img, 3, 2);
    let c1 = conv_taint(&c0, 3, 2);
    let c2 = conv_taint(&c1, 3, 2);
    let p1 = or(&conv_taint(&c1, 1, 1), &up_taint(&conv_taint(&c2, 3, 1)));
    let p0 = or(&conv_taint(&c0, 1, 1), &up_taint(&conv_taint(&p1, 3, 1)));
    let level = [p0, p1, c2].into_iter().nth(l)?;
    let lo = level.iter().position(|t| !t)?;
    let hi = level.iter().rposition(|t| !t)?;
    Some((lo, hi))
}

/// Texel window `(x_lo, x_hi, y_lo, y_hi)` of level `l` for a `w x h` image.
pub fn level_window(w: usize, h: usize, l: usize) -> Option<[usize; 4]> {
    let (xl, xh) = interior_window(w.div_ceil(8) * 8, l)?;
    let (yl, yh) = interior_window(h.div_ceil(8) * 8, l)?;
    Some([xl, xh.min(w.div_ceil(STRIDES[l]) - 1), yl, yh.min(h.div_ceil(STRIDES[l]) - 1)])
}

/// Depths spaced uniformly in inverse depth from `near` to `far`.
pub fn sample_depths(near: f64, far: f64, count: usize) -> Result<Vec<f64>> {
    if !(near > 0.0 && near < far && far.is_finite()) {
        return Err(Error::Domain(format!("sample_depths: need 0 < near < far, got {near} / {far}")));
    }
    if count < 2 {
        return Err(Error::Domain(format!("sample_depths: need at least 2 samples, got {count}")));
    }
    let (a, b) = (1.0 / near, 1.0 / far);
    Ok((0..count)
        .map(|k| {
            if k == count - 1 {
                far
            } else {
                1.0 / (a + (b - a) * k as f64 / (count - 1) as f64)
            }
        })
        .collect())
}

fn intervals(z: &[f64], last: Option<f64>) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Domain("volume_render: no samples".into()));
    }
    if let Some(k) = z.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::Domain(format!("volume_render: depths not strictly increasing at {k}")));
    }
    let mut d: Vec<f64> = z.windows(2).map(|w| w[1] - w[0]).collect();
    match (last, d.last()) {
        (Some(l), _) => d.push(l),
        (None, Some(&l)) => d.push(l),
        (None, None) => return Err(Error::Domain("volume_render: single sample needs an explicit last interval".into())),
    }
    Ok(d)
}

/// One ray evaluated outside the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderSample {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub depths: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub transmittance: Vec<f64>,
    pub weights: Vec<f64>,
    pub color: [f64; 3],
    pub depth: f64,
}

impl RenderSample {
    /// Quadrature compositing. `last_delta` overrides the final interval,
    /// which otherwise repeats the previous one.
    pub fn evaluate(depths: &[f64], sigmas: &[f64], colors: &[[f64; 3]], last_delta: Option<f64>) -> Result<Self> {
        if sigmas.len() != depths.len() || colors.len() != depths.len() {
            return Err(Error::Shape("volume_render: depth, sigma and colour counts differ".into()));
        }
        if let Some(i) = sigmas.iter().position(|s| !(*s >= 0.0)) {
            return Err(Error::Domain(format!("volume_render: negative or NaN density at {i}")));
        }
        let delta = intervals(depths, last_delta)?;
        let mut acc = 0.0f64;
        let (mut transmittance, mut weights) = (Vec::new(), Vec::new());
        let (mut color, mut depth) = ([0.0; 3], 0.0);
        for k in 0..depths.len() {
            let t = (-acc).exp();
            let a = sigmas[k] * delta[k];
            let w = t * (1.0 - (-a).exp());
            for c in 0..3 {
                color[c] += w * colors[k][c];
            }
            depth += w * depths[k];
            transmittance.push(t);
            weights.push(w);
            acc += a;
        }
        Ok(Self {
            origin: [0.0; 3],
            direction: [0.0, 0.0, 1.0],
            depths: depths.to_vec(),
            sigmas: sigmas.to_vec(),
            colors: colors.to_vec(),
            transmittance,
            weights,
            color,
            depth,
        })
    }

    pub fn opacity(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Differentiable compositing of `[r, k]` densities and `[r, k, 3]`
/// colours at shared depths. Returns colour `[r,3]`, depth `[r,1]` and
/// weights `[r,k]`.
pub fn volume_render(tape: &mut Tape, sigma: Var, color: Var, depths: &[f64]) -> Result<(Var, Var, Var)> {
    let (r, k) = match tape.shape(sigma) {
        [r, k] => (*r, *k),
        s => return Err(Error::Shape(format!("volume_render: sigma must be [r,k], got {s:?}"))),
    };
    if tape.shape(color) != [r, k, 3] || depths.len() != k {
        return Err(Error::Shape(format!(
            "volume_render: colour {:?} / {} depths do not match sigma [{r},{k}]",
            tape.shape(color),
            depths.len()
        )));
    }
    let delta = intervals(depths, None)?;
    let dv = tape.constant(Tensor::new(&[1, k], delta)?);
    let a = tape.mul(sigma, dv)?;
    // exclusive cumulative sum along samples
    let upper = tape.constant(Tensor::from_fn(&[k, k], |i| if i / k < i % k { 1.0 } else { 0.0 }));
    let cum = tape.matmul(a, upper)?;
    let neg = tape.neg(cum)?;
    let trans = tape.exp(neg)?;
    let na = tape.neg(a)?;
    let ea = tape.exp(na)?;
    let one_minus = tape.neg(ea)?;
    let alpha = tape.add_scalar(one_minus, 1.0)?;
    let w = tape.mul(trans, alpha)?;
    let w3 = tape.reshape(w, &[r, k, 1])?;
    let wc = tape.mul(w3, color)?;
    let c = tape.sum_axis(wc, 1)?;
    let zv = tape.constant(Tensor::new(&[k, 1], depths.to_vec())?);
    let d = tape.matmul(w, zv)?;
    Ok((c, d, w))
}

/// Renderer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub near: f64,
    pub far: f64,
    pub samples: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { near: 2.0, far: 12.0, samples: 64 }
    }
}

/// A source view as seen from the target camera.
#[derive(Clone, Debug)]
pub struct SourceView {
    /// `[h, w, 3]` colours.
    pub image: Var,
    /// Renderer-level features `[h/s, w/s, c]`.
    pub features: Var,
    pub k: Intrinsics,
    /// Target-camera to source-camera transform.
    pub p_ij: TapePose,
}

/// Rendered ray batch.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: Var,
    pub depth: Var,
    pub weights: Var,
    /// False when no sample of the ray projects into any source view.
    pub ray_valid: Vec<bool>,
    pub depths: Vec<f64>,
}

/// Aggregated per-sample feature `[n, AGG_WIDTH + 3]`: learned map of the
/// pooled statistics followed by the pooled mean colour.
#[derive(Clone, Debug)]
pub struct Aggregated {
    pub g: Var,
    pub valid: Vec<f64>,
}

/// Aggregation, density and colour heads plus the feature pyramid.
#[derive(Clone, Debug)]
pub struct GeneRf {
    pub fpn: Fpn,
    pub agg: Linear,
    pub density: Linear,
    pub color_hidden: Linear,
    pub color_out: Linear,
    pub config: RenderConfig,
}

/// Per-view vector width: colour plus renderer-level features.
pub const VIEW_WIDTH: usize = 3 + CHANNELS[RENDER_LEVEL];
pub const G_WIDTH: usize = AGG_WIDTH + 3;

impl GeneRf {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: RenderConfig) -> Self {
        let g = Group::Renderer;
        Self {
            fpn: Fpn::new(store, rng),
            agg: Linear::new(store, rng, "render.agg", g, 2 * VIEW_WIDTH, AGG_WIDTH),
            density: Linear::new(store, rng, "render.density", g, G_WIDTH, 1),
            color_hidden: Linear::new(store, rng, "render.color0", g, G_WIDTH + 3, 32),
            color_out: Linear::zeroed(store, "render.color1", g, 32, 3),
            config,
        }
    }

    /// Mean/variance pooling over the valid views, then a ReLU layer. Rows
    /// with no valid view come out as zeros.
    pub fn aggregate(&self, tape: &mut Tape, p: &Bound, views: &[Var], masks: &[Vec<f64>]) -> Result<Aggregated> {
        let moments = tape.masked_moments(views, masks)?;
        let n = tape.shape(moments)[0];
        let valid: Vec<f64> =
            (0..n).map(|i| if masks.iter().any(|m| m[i] > 0.0) { 1.0 } else { 0.0 }).collect();
        let h = self.agg.forward(tape, p, moments)?;
        let h = tape.relu(h)?;
        let vm = tape.constant(Tensor::new(&[n, 1], valid.clone())?);
        let h = tape.mul(h, vm)?;
        let mean_rgb = tape.slice(moments, 1, 0, 3)?;
        let g = tape.concat(&[h, mean_rgb], 1)?;
        Ok(Aggregated { g, valid })
    }

    /// `sigma = softplus(.)`, `c = sigmoid(mlp([g, dir]) + logit(mean colour))`.
    pub fn predict_density_color(&self, tape: &mut Tape, p: &Bound, g: Var, dir: Var) -> Result<(Var, Var)> {
        let s = self.density.forward(tape, p, g)?;
        let sigma = tape.softplus(s)?;
        let x = tape.concat(&[g, dir], 1)?;
        let h = self.color_hidden.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        let out = self.color_out.forward(tape, p, h)?;
        let mean = tape.slice(g, 1, AGG_WIDTH, AGG_WIDTH + 3)?;
        let m = tape.clamp(mean, 0.01, 0.99)?;
        let one_minus = tape.neg(m)?;
        let one_minus = tape.add_scalar(one_minus, 1.0)?;
        let ratio = tape.div(m, one_minus)?;
        let logit = tape.log(ratio)?;
        let pre = tape.add(out, logit)?;
        let color = tape.sigmoid(pre)?;
        Ok((sigma, color))
    }

    /// Renders target-view rays through `pixels` from the source views.
    pub fn render_rays(
        &self,
        tape: &mut Tape,
        p: &Bound,
        k_target: &Intrinsics,
        sources: &[SourceView],
        pixels: &[[f64; 2]],
    ) -> Result<RenderOutput> {
        if sources.is_empty() {
            return Err(Error::Domain("render_rays: no source views".into()));
        }
        let depths = sample_depths(self.config.near, self.config.far, self.config.samples)?;
        let (r, k) = (pixels.len(), depths.len());
        let n = r * k;
        let mut pts = Vec::with_capacity(3 * n);
        let mut dirs = Vec::with_capacity(3 * n);
        for px in pixels {
            let ray = k_target.ray(px[0], px[1]);
            let u = ray.normalize();
            for &z in &depths {
                pts.extend_from_slice(&[ray.x * z, ray.y * z, z]);
                dirs.extend_from_slice(&[u.x, u.y, u.z]);
            }
        }
        let x = tape.constant(Tensor::new(&[n, 3], pts)?);
        let dir = tape.constant(Tensor::new(&[n, 3], dirs)?);
        let mut views = Vec::with_capacity(sources.len());
        let mut masks = Vec::with_capacity(sources.len());
        for s in sources {
            let (v, m) = sample_view(tape, s, x)?;
            views.push(v);
            masks.push(m);
        }
        let agg = self.aggregate(tape, p, &views, &masks)?;
        let (sigma, color) = self.predict_density_color(tape, p, agg.g, dir)?;
        let sigma = tape.reshape(sigma, &[r, k])?;
        let color = tape.reshape(color, &[r, k, 3])?;
        let (c, d, w) = volume_render(tape, sigma, color, &depths)?;
        let ray_valid = (0..r).map(|i| agg.valid[i * k..(i + 1) * k].iter().any(|v| *v > 0.0)).collect();
        Ok(RenderOutput { color: c, depth: d, weights: w, ray_valid, depths })
    }
}

/// Projects target-camera points into a source view and samples colour and
/// features. Returns the masked `[n, VIEW_WIDTH]` vectors and the mask.
pub fn sample_view(tape: &mut Tape, s: &SourceView, x: Var) -> Result<(Var, Vec<f64>)> {
    let n = tape.shape(x)[0];
    let xj = s.p_ij.transform(tape, x)?;
    let (uv, front) = project_points(tape, &s.k, xj)?;
    let keep = tape.constant(Tensor::new(&[n, 1], front.clone())?);
    let off = tape.constant(Tensor::new(&[n, 1], front.iter().map(|f| if *f > 0.0 { 0.0 } else { -1e6 }).collect())?);
    let uv = tape.mul(uv, keep)?;
    let uv = tape.add(uv, off)?;
    let rgb = tape.bilinear_sample(s.image, uv)?;
    let fuv = tape.scale(uv, 1.0 / STRIDES[RENDER_LEVEL] as f64)?;
    let feat = tape.bilinear_sample(s.features, fuv)?;
    let mask: Vec<f64> = front.iter().zip(rgb.mask.data()).map(|(a, b)| a * b).collect();
    let v = tape.concat(&[rgb.values, feat.values], 1)?;
    let m = tape.constant(Tensor::new(&[n, 1], mask.clone())?);
    Ok((tape.mul(v, m)?, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::geometry::SE3Pose;
    use rand::{Rng, SeedableRng};

    fn model(seed: u64) -> (ParamStore, GeneRf) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = GeneRf::new(&mut store, &mut rng, RenderConfig::default());
        (store, m)
    }

    #[test]
    fn pyramid_shapes_and_zero_response() {
        let (store, m) = model(0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| true);
        let img = tape.constant(Tensor::zeros(&[64, 64, 3]));
        let pyr = m.fpn.extract(&mut tape, &p, img, 0).unwrap();
        let shapes: Vec<_> = pyr.levels.iter().map(|&v| tape.shape(v).to_vec()).collect();
        assert_eq!(shapes, vec![vec![32, 32, 16], vec![16, 16, 32], vec![8, 8, 64]]);
        // biases are zero at init, so a zero image gives zero features
        for &v in &pyr.levels {
            assert_eq!(tape.value(v).max_abs(), 0.0);
        }
    }

    #[test]
    fn two_pixel_shift_moves_level_zero_by_one_texel() {
        // A 2 px shift is one level-0 texel but half a level-1 texel, so
        // only the bottom-up branch is exactly equivariant; every deviation
        // of p0 must be bounded by the change of the upsampled coarse branch.
        let (store, m) = model(12);
        let tex = |x: usize, y: usize, c: usize| {
            let (u, v) = (x as f64 * std::f64::consts::TAU / 32.0, y as f64 * std::f64::consts::TAU / 32.0);
            0.5 + 0.2 * (u + c as f64).sin() * (v + 0.5 * c as f64).cos() + 0.15 * (u - v).cos()
        };
        let run = |dx: usize| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, |_| false);
            let img = tape.constant(Tensor::from_fn(&[64, 64, 3], |i| tex((i / 3 % 64 + dx) % 64, i / 192, i % 3)));
            let pyr = m.fpn.extract(&mut tape, &p, img, 0).unwrap();
            let x = tape.reshape(img, &[1, 64, 64, 3]).unwrap();
            let c0 = m.fpn.down[0].forward(&mut tape, &p, x).unwrap();
            let c0 = tape.relu(c0).unwrap();
            let lat = m.fpn.lateral[0].forward(&mut tape, &p, c0).unwrap();
            let p1 = tape.reshape(pyr.level(1), &[1, 16, 16, 32]).unwrap();
            let t = m.fpn.top[0].forward(&mut tape, &p, p1).unwrap();
            let up = tape.upsample2x(t).unwrap();
            (tape.value(pyr.level(0)).clone(), tape.value(lat).clone(), tape.value(up).clone())
        };
        let ((p_a, lat_a, up_a), (p_b, lat_b, up_b)) = (run(0), run(2));
        let (lo, hi) = interior_window(64, 0).unwrap();
        let (mut err, mut norm) = (0.0, 0.0);
        for y in lo..=hi {
            for x in lo..hi {
                for c in 0..CHANNELS[0] {
                    let (ia, ib) = ((y * 32 + x + 1) * 16 + c, (y * 32 + x) * 16 + c);
                    assert!((lat_a.data()[ia] - lat_b.data()[ib]).abs() < 1e-12);
                    let dp = (p_a.data()[ia] - p_b.data()[ib]).abs();
                    assert!(dp <= (up_a.data()[ia] - up_b.data()[ib]).abs() + 1e-12);
                    err += dp * dp;
                    norm += p_a.data()[ia].powi(2);
                }
            }
        }
        assert!((err / norm).sqrt() < 0.25, "relative shift error {}", (err / norm).sqrt());
    }

    #[test]
    fn undersized_image_is_padded() {
        let (store, m) = model(0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| true);
        let img = tape.constant(Tensor::full(&[30, 21, 3], 0.5));
        let pyr = m.fpn.extract(&mut tape, &p, img, 3).unwrap();
        assert_eq!(pyr.padded, (24, 32));
        assert_eq!(tape.shape(pyr.level(2)), &[4, 3, 64]);
    }

    #[test]
    fn interior_windows_exclude_padding() {
        assert_eq!(interior_window(96, 2), Some((1, 11)));
        let (lo, hi) = interior_window(96, 1).unwrap();
        assert!(lo >= 1 && hi <= 22 && lo < hi);
        assert_eq!(interior_window(8, 2), None);
        assert_eq!(interior_window(96, 1), Some((4, 20)));
    }

    #[test]
    fn features_inside_the_window_ignore_image_borders() {
        let (store, m) = model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = Tensor::from_fn(&[96, 96, 3], |_| rng.gen_range(0.0..1.0));
        let run = |t: Tensor| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, |_| false);
            let img = tape.constant(t);
            let pyr = m.fpn.extract(&mut tape, &p, img, 0).unwrap();
            tape.value(pyr.level(1)).clone()
        };
        let a = run(base.clone());
        // prepend 8 columns on the left: level 1 shifts by exactly 2 texels,
        // and the window contents must agree bitwise up to rounding
        let mut shifted = Tensor::zeros(&[96, 104, 3]);
        for y in 0..96 {
            for x in 0..104 {
                for c in 0..3 {
                    let sx = if x >= 8 { x - 8 } else { x };
                    shifted.data_mut()[(y * 104 + x) * 3 + c] = base.data()[(y * 96 + sx) * 3 + c] * if x >= 8 { 1.0 } else { 0.3 };
                }
            }
        }
        let b = run(shifted);
        let (lo, hi) = interior_window(96, 1).unwrap();
        let (lo2, hi2) = interior_window(104, 1).unwrap();
        let mut worst: f64 = 0.0;
        for y in lo..=hi {
            for x in lo..=hi {
                if x + 2 < lo2 || x + 2 > hi2 {
                    continue;
                }
                for c in 0..CHANNELS[1] {
                    let va = a.data()[(y * 24 + x) * 32 + c];
                    let vb = b.data()[(y * 26 + x + 2) * 32 + c];
                    worst = worst.max((va - vb).abs());
                }
            }
        }
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn sample_depths_hand_values() {
        let z = sample_depths(1.0, 2.0, 3).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-15 && (z[1] - 4.0 / 3.0).abs() < 1e-15 && z[2] == 2.0);
        assert_eq!(sample_depths(2.0, 12.0, 2).unwrap(), vec![2.0, 12.0]);
        let d = sample_depths(2.0, 12.0, 64).unwrap();
        assert_eq!(d.len(), RenderConfig::default().samples);
        assert!(d.windows(2).all(|w| w[1] > w[0]));
        assert!(matches!(sample_depths(0.0, 2.0, 4), Err(Error::Domain(_))));
        assert!(matches!(sample_depths(3.0, 2.0, 4), Err(Error::Domain(_))));
    }

    #[test]
    fn volume_render_hand_cases() {
        let r = RenderSample::evaluate(&[1.0, 2.0, 3.0], &[0.0; 3], &[[1.0; 3]; 3], None).unwrap();
        assert_eq!((r.color, r.depth, r.opacity()), ([0.0; 3], 0.0, 0.0));
        let r = RenderSample::evaluate(&[2.0], &[std::f64::consts::LN_2], &[[1.0, 0.0, 0.0]], Some(1.0)).unwrap();
        assert!((r.color[0] - 0.5).abs() < 1e-15 && r.color[1] == 0.0 && (r.depth - 1.0).abs() < 1e-15);
        assert!(RenderSample::evaluate(&[2.0, 1.0], &[1.0, 1.0], &[[0.0; 3]; 2], None).is_err());
    }

    #[test]
    fn two_sample_oracle() {
        let (z, s) = ([1.5, 2.25], [0.7, 1.3]);
        let c = [[0.2, 0.4, 0.9], [0.8, 0.1, 0.3]];
        let r = RenderSample::evaluate(&z, &s, &c, None).unwrap();
        let d = 0.75;
        let w0 = 1.0 - (-s[0] * d).exp();
        let w1 = (-s[0] * d).exp() * (1.0 - (-s[1] * d).exp());
        for k in 0..3 {
            assert!((r.color[k] - (w0 * c[0][k] + w1 * c[1][k])).abs() < 1e-12);
        }
        assert!((r.depth - (w0 * z[0] + w1 * z[1])).abs() < 1e-12);

        let mut tape = Tape::new();
        let sv = tape.leaf(Tensor::new(&[1, 2], s.to_vec()).unwrap());
        let cv = tape.leaf(Tensor::new(&[1, 2, 3], c.concat()).unwrap());
        let (col, dep, _) = volume_render(&mut tape, sv, cv, &z).unwrap();
        for k in 0..3 {
            assert!((tape.value(col).data()[k] - r.color[k]).abs() < 1e-12);
        }
        assert!((tape.value(dep).item() - r.depth).abs() < 1e-12);
    }

    #[test]
    fn volume_render_gradients_match_finite_differences() {
        let z = [2.0, 2.5, 3.5, 5.0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Tensor::from_fn(&[2, 4], |_| rng.gen_range(0.0..2.0));
        let c = Tensor::from_fn(&[2, 4, 3], |_| rng.gen_range(0.0..1.0));
        let rep = gradcheck::check(&[s, c], |t, v| {
            let (col, dep, _) = volume_render(t, v[0], v[1], &z)?;
            let a = t.sum(col)?;
            let b = t.sum(dep)?;
            t.add(a, b)
        })
        .unwrap();
        assert!(rep.passes(1e-6), "{rep:?}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn weights_are_a_sub_partition(s in prop::collection::vec(0.0f64..20.0, 2..16), scale in 1.0f64..3.0) {
                let k = s.len();
                let z: Vec<f64> = (0..k).map(|i| 2.0 + 0.3 * i as f64 + 0.01 * (i * i) as f64).collect();
                let c: Vec<[f64; 3]> = (0..k).map(|i| [(i as f64 * 0.37).fract(), 0.5, 1.0 - (i as f64 * 0.11).fract()]).collect();
                let r = RenderSample::evaluate(&z, &s, &c, None).unwrap();
                prop_assert!(r.transmittance[0] == 1.0);
                prop_assert!(r.transmittance.windows(2).all(|w| w[1] <= w[0]));
                prop_assert!(r.weights.iter().all(|w| (0.0..=1.0).contains(w)));
                let sw = r.opacity();
                prop_assert!(sw <= 1.0 + 1e-12);
                for ch in 0..3 {
                    let cmax = c.iter().map(|v| v[ch]).fold(0.0, f64::max);
                    prop_assert!(r.color[ch] <= cmax * sw + 1e-12);
                }
                prop_assert!(r.depth >= z[0] * sw - 1e-12 && r.depth <= z[k - 1] * sw + 1e-12);
                let s2: Vec<f64> = s.iter().map(|v| v * scale).collect();
                let r2 = RenderSample::evaluate(&z, &s2, &c, None).unwrap();
                prop_assert!(r2.opacity() >= sw - 1e-12);
            }
        }
    }

    #[test]
    fn aggregation_degenerate_and_permutation_cases() {
        let (store, m) = model(1);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| true);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = Tensor::from_fn(&[5, VIEW_WIDTH], |_| rng.gen_range(-1.0..1.0));
        let views: Vec<_> = (0..3).map(|_| tape.constant(v.clone())).collect();
        let masks = vec![vec![1.0; 5]; 3];
        let mom = tape.masked_moments(&views, &masks).unwrap();
        let md = tape.value(mom).clone();
        for i in 0..5 {
            for c in 0..VIEW_WIDTH {
                assert_eq!(md.data()[i * 2 * VIEW_WIDTH + c], v.data()[i * VIEW_WIDTH + c]);
                assert!(md.data()[i * 2 * VIEW_WIDTH + VIEW_WIDTH + c].abs() < 1e-15);
            }
        }
        let others: Vec<Var> = (0..3)
            .map(|_| tape.constant(Tensor::from_fn(&[5, VIEW_WIDTH], |_| rng.gen_range(-1.0..1.0))))
            .collect();
        let ms = vec![vec![1.0, 0.0, 1.0, 1.0, 0.0], vec![1.0; 5], vec![0.0, 1.0, 1.0, 0.0, 0.0]];
        let a = m.aggregate(&mut tape, &p, &others, &ms).unwrap();
        let perm = [2, 0, 1];
        let pv: Vec<Var> = perm.iter().map(|&i| others[i]).collect();
        let pm: Vec<Vec<f64>> = perm.iter().map(|&i| ms[i].clone()).collect();
        let b = m.aggregate(&mut tape, &p, &pv, &pm).unwrap();
        assert_eq!(tape.value(a.g).data(), tape.value(b.g).data());
    }

    #[test]
    fn all_masked_feature_gives_closed_form_density() {
        let (store, m) = model(2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| true);
        let v = tape.constant(Tensor::full(&[4, VIEW_WIDTH], 0.3));
        let a = m.aggregate(&mut tape, &p, &[v], &[vec![0.0; 4]]).unwrap();
        assert_eq!(tape.value(a.g).max_abs(), 0.0);
        let dir = tape.constant(Tensor::full(&[4, 3], 0.5));
        let (s, c) = m.predict_density_color(&mut tape, &p, a.g, dir).unwrap();
        for &x in tape.value(s).data() {
            assert!((x - std::f64::consts::LN_2).abs() < 1e-15);
        }
        assert!(tape.value(c).data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn head_outputs_stay_in_range() {
        let (mut store, m) = model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // give the heads non-trivial weights
        for name in ["render.density.b", "render.color1.w", "render.color1.b"] {
            let shape = store.by_name(name).unwrap().shape().to_vec();
            store.set_by_name(name, Tensor::from_fn(&shape, |_| rng.gen_range(-3.0..3.0))).unwrap();
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| true);
        let g = tape.constant(Tensor::from_fn(&[10_000, G_WIDTH], |_| rng.gen_range(-10.0..10.0)));
        let dir = tape.constant(Tensor::from_fn(&[10_000, 3], |_| rng.gen_range(-1.0..1.0)));
        let (s, c) = m.predict_density_color(&mut tape, &p, g, dir).unwrap();
        assert!(tape.value(s).data().iter().all(|x| *x >= 0.0 && x.is_finite()));
        assert!(tape.value(c).data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn head_gradient_wrt_feature_matches_finite_differences() {
        let (mut store, m) = model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = store.by_name("render.color1.w").unwrap().shape().to_vec();
        store.set_by_name("render.color1.w", Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0))).unwrap();
        let g = Tensor::from_fn(&[3, G_WIDTH], |i| if i % G_WIDTH >= AGG_WIDTH { 0.2 + 0.05 * (i % 7) as f64 } else { rng.gen_range(-1.0..1.0) });
        let dir = Tensor::from_fn(&[3, 3], |i| (i as f64 * 0.3).sin());
        let rep = gradcheck::check_with(
            &[g, dir],
            &[true, false],
            |t, v| {
                let p = store.bind(t, |_| false);
                let (s, c) = m.predict_density_color(t, &p, v[0], v[1])?;
                let a = t.sum(s)?;
                let b = t.sum(c)?;
                t.add(a, b)
            },
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    fn micro_rig(tape: &mut Tape, twist: Var) -> Result<(Vec<SourceView>, Intrinsics)> {
        let k = Intrinsics::from_fov(16, 16, 60.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut sources = Vec::new();
        let deltas = TapePose::exp_batch(tape, twist)?;
        for (j, d) in deltas.into_iter().enumerate() {
            let base = SE3Pose::exp(&crate::geometry::Twist::from_slice(&[0.01, -0.02 * j as f64, 0.0, 0.1 + 0.05 * j as f64, 0.02, 0.0]));
            let base = TapePose::constant(tape, &base)?;
            let p_ij = base.premultiply(tape, &d)?;
            let image = tape.constant(Tensor::from_fn(&[16, 16, 3], |_| rng.gen_range(0.0..1.0)));
            let features = tape.constant(Tensor::from_fn(&[8, 8, CHANNELS[0]], |_| rng.gen_range(-1.0..1.0)));
            sources.push(SourceView { image, features, k, p_ij });
        }
        Ok((sources, k))
    }

    #[test]
    fn color_gradient_wrt_source_twist_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = GeneRf::new(&mut store, &mut rng, RenderConfig { near: 2.0, far: 6.0, samples: 3 });
        let shape = store.by_name("render.color1.w").unwrap().shape().to_vec();
        store.set_by_name("render.color1.w", Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0))).unwrap();
        let twist = Tensor::from_fn(&[2, 6], |i| 0.01 * ((i * 7 % 5) as f64 - 2.0));
        let rep = gradcheck::check(&[twist], |t, v| {
            let p = store.bind(t, |_| false);
            let (sources, k) = micro_rig(t, v[0])?;
            let out = m.render_rays(t, &p, &k, &sources, &[[7.3, 8.1]])?;
            t.sum(out.color)
        })
        .unwrap();
        assert!(rep.passes(1e-3), "{rep:?}");
    }

    #[test]
    fn identity_rig_smoke_test() {
        let (store, m) = model(8);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| true);
        let k = Intrinsics::from_fov(32, 32, 60.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = tape.constant(Tensor::from_fn(&[32, 32, 3], |_| rng.gen_range(0.0..1.0)));
        let pyr = m.fpn.extract(&mut tape, &p, img, 0).unwrap();
        let p_ij = TapePose::identity(&mut tape).unwrap();
        let src = SourceView { image: img, features: pyr.level(0), k, p_ij };
        let pixels: Vec<[f64; 2]> = (0..32).step_by(3).flat_map(|y| (0..32).step_by(3).map(move |x| [x as f64, y as f64])).collect();
        let out = m.render_rays(&mut tape, &p, &k, &[src], &pixels).unwrap();
        assert!(tape.value(out.color).is_finite() && tape.value(out.depth).is_finite());
        let w = tape.value(out.weights);
        for r in 0..pixels.len() {
            let s: f64 = w.data()[r * 64..(r + 1) * 64].iter().sum();
            assert!(s <= 1.0 + 1e-12);
        }
        assert!(out.ray_valid.iter().all(|v| *v));
    }
}
