//! Pose-free neighbour selection: corner keypoints, descriptor matching,
//! epipolar RANSAC and an inlier-count covisibility graph.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::Intrinsics;
use crate::imageio::Image;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
    /// Zero-mean, unit-norm grey patch.
    pub descriptor: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub max_keypoints: usize,
    pub nms_radius: usize,
    pub harris_k: f64,
    /// Descriptor patch is `(2r+1)^2` pixels.
    pub patch_radius: usize,
    /// Responses below this fraction of the image maximum are dropped.
    pub relative_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { max_keypoints: 512, nms_radius: 4, harris_k: 0.04, patch_radius: 4, relative_threshold: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchConfig {
    pub ratio: f64,
    pub sampson_px: f64,
    pub iterations: usize,
    pub seed: u64,
    pub min_matches: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { ratio: 0.8, sampson_px: 2.0, iterations: 1000, seed: 0, min_matches: 30 }
    }
}

/// Harris response `det(M) - k tr(M)^2` of the Gaussian-weighted structure tensor.
pub fn harris_response(gray: &[f64], w: usize, h: usize, k: f64) -> Vec<f64> {
    let at = |x: isize, y: isize| gray[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize];
    let mut ix = vec![0.0; w * h];
    let mut iy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            // Sobel
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            ix[y as usize * w + x as usize] = gx / 8.0;
            iy[y as usize * w + x as usize] = gy / 8.0;
        }
    }
    let taps = [1.0, 4.0, 6.0, 4.0, 1.0].map(|t| t / 16.0);
    let blur = |src: &[f64]| {
        let mut tmp = vec![0.0; w * h];
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (o, t) in taps.iter().enumerate() {
                    let xx = (x as isize + o as isize - 2).clamp(0, w as isize - 1) as usize;
                    s += t * src[y * w + xx];
                }
                tmp[y * w + x] = s;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (o, t) in taps.iter().enumerate() {
                    let yy = (y as isize + o as isize - 2).clamp(0, h as isize - 1) as usize;
                    s += t * tmp[yy * w + x];
                }
                out[y * w + x] = s;
            }
        }
        out
    };
    let xx: Vec<f64> = ix.iter().map(|a| a * a).collect();
    let yy: Vec<f64> = iy.iter().map(|a| a * a).collect();
    let xy: Vec<f64> = ix.iter().zip(&iy).map(|(a, b)| a * b).collect();
    let (sxx, syy, sxy) = (blur(&xx), blur(&yy), blur(&xy));
    (0..w * h)
        .map(|i| {
            let tr = sxx[i] + syy[i];
            sxx[i] * syy[i] - sxy[i] * sxy[i] - k * tr * tr
        })
        .collect()
}

fn describe(gray: &[f64], w: usize, x: usize, y: usize, r: usize) -> Option<Vec<f64>> {
    let mut d = Vec::with_capacity((2 * r + 1).pow(2));
    for yy in y - r..=y + r {
        for xx in x - r..=x + r {
            d.push(gray[yy * w + xx]);
        }
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.iter_mut().for_each(|v| *v -= mean);
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return None;
    }
    d.iter_mut().for_each(|v| *v /= norm);
    Some(d)
}

/// Harris corners with radius non-maximum suppression and patch descriptors.
/// Keypoints are returned strongest first.
pub fn detect_and_describe(image: &Image, cfg: &DetectorConfig) -> Vec<Keypoint> {
    let (w, h) = (image.width, image.height);
    let gray = image.gray();
    let resp = harris_response(&gray, w, h, cfg.harris_k);
    let peak = resp.iter().cloned().fold(0.0f64, f64::max);
    let border = cfg.patch_radius.max(1);
    let mut keypoints = Vec::new();
    if peak <= 1e-12 || w <= 2 * border || h <= 2 * border {
        log::warn!("low-texture image: no corner response");
        return keypoints;
    }
    let floor = peak * cfg.relative_threshold;
    let r = cfg.nms_radius as isize;
    let mut candidates = Vec::new();
    for y in border..h - border {
        for x in border..w - border {
            let v = resp[y * w + x];
            if v <= floor {
                continue;
            }
            let idx = y * w + x;
            let mut is_max = true;
            'nms: for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy > r * r || (dx == 0 && dy == 0) {
                        continue;
                    }
                    let (xx, yy) = (x as isize + dx, y as isize + dy);
                    if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                        continue;
                    }
                    let j = yy as usize * w + xx as usize;
                    // ties go to the earlier pixel in raster order
                    if resp[j] > v || (resp[j] == v && j < idx) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                candidates.push((v, x, y));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    for (v, x, y) in candidates {
        if keypoints.len() == cfg.max_keypoints {
            break;
        }
        if let Some(descriptor) = describe(&gray, w, x, y, cfg.patch_radius) {
            keypoints.push(Keypoint { x: x as f64, y: y as f64, score: v, descriptor });
        }
    }
    if keypoints.len() < 8 {
        log::warn!("low-texture image: only {} keypoints", keypoints.len());
    }
    keypoints
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchSet {
    /// `(index in a, index in b)`, ascending in `a`.
    pub pairs: Vec<(usize, usize)>,
    /// False when too few matches survived for the epipolar filter.
    pub filtered: bool,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest and the second-nearest distance.
fn nearest(d: &[f64], set: &[Keypoint]) -> Option<(usize, f64, f64)> {
    let mut best = (usize::MAX, f64::INFINITY);
    let mut second = f64::INFINITY;
    for (j, k) in set.iter().enumerate() {
        let v = dist2(d, &k.descriptor);
        if v < best.1 {
            second = best.1;
            best = (j, v);
        } else if v < second {
            second = v;
        }
    }
    (best.0 != usize::MAX).then_some((best.0, best.1.sqrt(), second.sqrt()))
}

/// Mutual nearest neighbours passing the ratio test.
pub fn mutual_matches(a: &[Keypoint], b: &[Keypoint], ratio: f64) -> Vec<(usize, usize)> {
    let back: Vec<Option<usize>> = b.iter().map(|k| nearest(&k.descriptor, a).map(|n| n.0)).collect();
    let mut out = Vec::new();
    for (i, k) in a.iter().enumerate() {
        let Some((j, d1, d2)) = nearest(&k.descriptor, b) else { continue };
        let passes = if d2.is_finite() { d1 < ratio * d2 } else { true };
        if passes && back[j] == Some(i) {
            out.push((i, j));
        }
    }
    out
}

/// Sampson distance in pixels of `xb^T F xa = 0`.
pub fn sampson_distance(f: &Matrix3<f64>, xa: (f64, f64), xb: (f64, f64)) -> f64 {
    let a = Vector3::new(xa.0, xa.1, 1.0);
    let b = Vector3::new(xb.0, xb.1, 1.0);
    let fa = f * a;
    let fb = f.transpose() * b;
    let e = b.dot(&fa);
    let den = fa.x * fa.x + fa.y * fa.y + fb.x * fb.x + fb.y * fb.y;
    if den < 1e-300 {
        return if e.abs() < 1e-300 { 0.0 } else { f64::INFINITY };
    }
    (e * e / den).sqrt()
}

/// Fundamental matrix from known intrinsics and relative pose `x_b = R x_a + t`.
pub fn fundamental_from_pose(k: &Intrinsics, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Matrix3<f64> {
    let t = translation;
    let tx = Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0);
    let kinv = k.matrix().try_inverse().expect("intrinsics invertible");
    kinv.transpose() * tx * rotation * kinv
}

/// Linear eight-point estimate from normalised correspondences, rank 2 enforced.
fn eight_point(pa: &[Vector3<f64>], pb: &[Vector3<f64>]) -> Option<Matrix3<f64>> {
    let mut ata = DMatrix::<f64>::zeros(9, 9);
    for (a, b) in pa.iter().zip(pb) {
        let row = [b.x * a.x, b.x * a.y, b.x, b.y * a.x, b.y * a.y, b.y, a.x, a.y, 1.0];
        for r in 0..9 {
            for c in 0..9 {
                ata[(r, c)] += row[r] * row[c];
            }
        }
    }
    let eig = SymmetricEigen::new(ata);
    let (imin, _) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    let v = eig.eigenvectors.column(imin);
    let f = Matrix3::from_row_slice(v.as_slice());
    let svd = f.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut s = svd.singular_values;
    // singular values are sorted descending
    s[2] = 0.0;
    let f2 = u * Matrix3::from_diagonal(&s) * vt;
    f2.iter().all(|x| x.is_finite()).then_some(f2)
}

/// Seeded RANSAC over the eight-point fundamental matrix.
/// Returns the inlier mask of the best model, refitted on its inliers.
pub fn ransac_fundamental(
    xa: &[(f64, f64)],
    xb: &[(f64, f64)],
    k: &Intrinsics,
    cfg: &MatchConfig,
) -> (Option<Matrix3<f64>>, Vec<bool>) {
    let n = xa.len();
    if n < 8 {
        return (None, vec![true; n]);
    }
    // condition with the intrinsics; F_pix = K^-T F_n K^-1
    let kinv = k.matrix().try_inverse().expect("intrinsics invertible");
    let norm = |p: &(f64, f64)| kinv * Vector3::new(p.0, p.1, 1.0);
    let na: Vec<Vector3<f64>> = xa.iter().map(norm).collect();
    let nb: Vec<Vector3<f64>> = xb.iter().map(norm).collect();
    let to_pix = |f: Matrix3<f64>| kinv.transpose() * f * kinv;
    let score = |f: &Matrix3<f64>| -> Vec<bool> {
        (0..n).map(|i| sampson_distance(f, xa[i], xb[i]) <= cfg.sampson_px).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Matrix3<f64>, Vec<bool>, usize)> = None;
    for _ in 0..cfg.iterations {
        let idx = sample(&mut rng, n, 8).into_vec();
        let sa: Vec<_> = idx.iter().map(|&i| na[i]).collect();
        let sb: Vec<_> = idx.iter().map(|&i| nb[i]).collect();
        let Some(fnorm) = eight_point(&sa, &sb) else { continue };
        let f = to_pix(fnorm);
        let mask = score(&f);
        let c = mask.iter().filter(|m| **m).count();
        if best.as_ref().map_or(true, |b| c > b.2) {
            best = Some((f, mask, c));
        }
    }
    let Some((mut f, mut mask, mut count)) = best else { return (None, vec![false; n]) };
    if count >= 8 {
        let sa: Vec<_> = (0..n).filter(|&i| mask[i]).map(|i| na[i]).collect();
        let sb: Vec<_> = (0..n).filter(|&i| mask[i]).map(|i| nb[i]).collect();
        if let Some(fnorm) = eight_point(&sa, &sb) {
            let refit = to_pix(fnorm);
            let m2 = score(&refit);
            let c2 = m2.iter().filter(|m| **m).count();
            if c2 >= count {
                (f, mask, count) = (refit, m2, c2);
            }
        }
    }
    let _ = count;
    (Some(f), mask)
}

/// Mutual/ratio matching followed by epipolar RANSAC.
pub fn match_and_filter(a: &[Keypoint], b: &[Keypoint], k: &Intrinsics, cfg: &MatchConfig) -> MatchSet {
    let raw = mutual_matches(a, b, cfg.ratio);
    if raw.len() < 8 || a.len() < 8 || b.len() < 8 {
        log::warn!("only {} mutual matches; returning them unfiltered", raw.len());
        return MatchSet { pairs: raw, filtered: false };
    }
    let xa: Vec<_> = raw.iter().map(|&(i, _)| (a[i].x, a[i].y)).collect();
    let xb: Vec<_> = raw.iter().map(|&(_, j)| (b[j].x, b[j].y)).collect();
    let (_, mask) = ransac_fundamental(&xa, &xb, k, cfg);
    let pairs = raw.into_iter().zip(mask).filter(|(_, m)| *m).map(|(p, _)| p).collect();
    MatchSet { pairs, filtered: true }
}

/// Symmetric covisibility graph. Each list is sorted by inlier count
/// descending, ties by smaller image index.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraph {
    pub neighbors: Vec<Vec<(usize, usize)>>,
}

impl SceneGraph {
    /// Keeps edges with `count >= min_matches`. Duplicate pairs keep the last count.
    pub fn from_counts(n: usize, counts: &[(usize, usize, usize)], min_matches: usize) -> Result<Self> {
        let mut table = vec![vec![None; n]; n];
        for &(i, j, c) in counts {
            if i >= n || j >= n {
                return Err(Error::Domain(format!("edge ({i},{j}) outside {n} images")));
            }
            if i == j {
                continue;
            }
            table[i][j] = Some(c);
            table[j][i] = Some(c);
        }
        let neighbors = table
            .into_iter()
            .map(|row| {
                let mut list: Vec<(usize, usize)> = row
                    .into_iter()
                    .enumerate()
                    .filter_map(|(j, c)| c.filter(|&c| c >= min_matches).map(|c| (j, c)))
                    .collect();
                list.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                list
            })
            .collect();
        Ok(Self { neighbors })
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn count(&self, i: usize, j: usize) -> Option<usize> {
        self.neighbors.get(i)?.iter().find(|e| e.0 == j).map(|e| e.1)
    }

    pub fn is_symmetric(&self) -> bool {
        self.neighbors
            .iter()
            .enumerate()
            .all(|(i, list)| list.iter().all(|&(j, c)| self.count(j, i) == Some(c)))
    }

    /// First `min(k, degree)` neighbours of `i`.
    pub fn select_neighbors(&self, i: usize, k: usize) -> Result<Vec<usize>> {
        self.select_neighbors_where(i, k, |_| true)
    }

    /// As [`select_neighbors`](Self::select_neighbors), skipping ids rejected by `allow`.
    pub fn select_neighbors_where(&self, i: usize, k: usize, allow: impl Fn(usize) -> bool) -> Result<Vec<usize>> {
        let list = self
            .neighbors
            .get(i)
            .ok_or_else(|| Error::Domain(format!("image {i} not in a graph of {} images", self.len())))?;
        let out: Vec<usize> = list.iter().map(|e| e.0).filter(|&j| allow(j)).take(k).collect();
        if out.is_empty() {
            log::debug!("image {i} is isolated in the scene graph");
        }
        Ok(out)
    }

    /// Lines `i j inlier_count`, one per undirected edge with `i < j`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, list) in self.neighbors.iter().enumerate() {
            let mut edges: Vec<_> = list.iter().filter(|e| e.0 > i).collect();
            edges.sort();
            for &&(j, c) in &edges {
                let _ = writeln!(s, "{i} {j} {c}");
            }
        }
        s
    }

    pub fn parse(text: &str, n: usize, min_matches: usize, source_name: &str) -> Result<Self> {
        let mut counts = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(Error::parse(source_name, ln + 1, "expected `i j inlier_count`"));
            }
            let p = |s: &str| s.parse::<usize>().map_err(|e| Error::parse(source_name, ln + 1, e.to_string()));
            counts.push((p(f[0])?, p(f[1])?, p(f[2])?));
        }
        Self::from_counts(n, &counts, min_matches)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, n: usize, min_matches: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, n, min_matches, &path.display().to_string())
    }
}

/// Matched pixel coordinates between images `i < j`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMatches {
    pub i: usize,
    pub j: usize,
    /// `(u_i, v_i, u_j, v_j)`
    pub points: Vec<[f64; 4]>,
}

pub fn format_matches(pairs: &[PairMatches]) -> String {
    let mut s = String::new();
    for p in pairs {
        let _ = writeln!(s, "pair {} {}", p.i, p.j);
        for q in &p.points {
            let _ = writeln!(s, "{} {} {} {}", q[0], q[1], q[2], q[3]);
        }
    }
    s
}

pub fn parse_matches(text: &str, source_name: &str) -> Result<Vec<PairMatches>> {
    let mut out: Vec<PairMatches> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f[0] == "pair" {
            if f.len() != 3 {
                return Err(Error::parse(source_name, ln + 1, "expected `pair i j`"));
            }
            let p = |s: &str| s.parse::<usize>().map_err(|e| Error::parse(source_name, ln + 1, e.to_string()));
            out.push(PairMatches { i: p(f[1])?, j: p(f[2])?, points: Vec::new() });
        } else {
            let Some(cur) = out.last_mut() else {
                return Err(Error::parse(source_name, ln + 1, "match line before any `pair` header"));
            };
            if f.len() != 4 {
                return Err(Error::parse(source_name, ln + 1, "expected `u_i v_i u_j v_j`"));
            }
            let mut q = [0.0; 4];
            for (k, s) in f.iter().enumerate() {
                q[k] = s.parse::<f64>().map_err(|e| Error::parse(source_name, ln + 1, e.to_string()))?;
            }
            cur.points.push(q);
        }
    }
    Ok(out)
}

pub fn read_matches(path: &Path) -> Result<Vec<PairMatches>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matches(&text, &path.display().to_string())
}

pub fn write_matches(path: &Path, pairs: &[PairMatches]) -> Result<()> {
    std::fs::write(path, format_matches(pairs)).map_err(|e| Error::io(path, e))
}

/// Graph whose edge counts are the number of imported matches per pair.
pub fn graph_from_matches(n: usize, pairs: &[PairMatches], min_matches: usize) -> Result<SceneGraph> {
    let counts: Vec<_> = pairs.iter().map(|p| (p.i, p.j, p.points.len())).collect();
    SceneGraph::from_counts(n, &counts, min_matches)
}

/// Detects, matches and filters every pair, then assembles the graph.
pub fn build_scene_graph(
    images: &[Image],
    k: &Intrinsics,
    det: &DetectorConfig,
    cfg: &MatchConfig,
) -> Result<(SceneGraph, Vec<PairMatches>)> {
    let kps: Vec<Vec<Keypoint>> = images.iter().map(|im| detect_and_describe(im, det)).collect();
    let mut pairs = Vec::new();
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            let m = match_and_filter(&kps[i], &kps[j], k, cfg);
            // unfiltered matches are not evidence of covisibility
            let points = if m.filtered {
                m.pairs.iter().map(|&(a, b)| [kps[i][a].x, kps[i][a].y, kps[j][b].x, kps[j][b].y]).collect()
            } else {
                Vec::new()
            };
            pairs.push(PairMatches { i, j, points });
        }
    }
    let graph = graph_from_matches(images.len(), &pairs, cfg.min_matches)?;
    Ok((graph, pairs))
}

/// Kendall tau-b between two score lists.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    let (mut conc, mut disc, mut ta, mut tb) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let da = (a[i] - a[j]).signum() * ((a[i] != a[j]) as i32 as f64);
            let db = (b[i] - b[j]).signum() * ((b[i] != b[j]) as i32 as f64);
            if da == 0.0 && db == 0.0 {
                continue;
            } else if da == 0.0 {
                ta += 1.0;
            } else if db == 0.0 {
                tb += 1.0;
            } else if da == db {
                conc += 1.0;
            } else {
                disc += 1.0;
            }
        }
    }
    let den = ((conc + disc + ta) * (conc + disc + tb)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (conc - disc) / den
    }
}
