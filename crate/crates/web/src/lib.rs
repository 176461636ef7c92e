//! WebAssembly bindings for the static demo page in `www/`.

use nalgebra::Vector3;
use wasm_bindgen::prelude::*;

use dbr_core::geometry::{Intrinsics, SE3Pose};
use dbr_core::renderer::{sample_depths, RenderSample};
use dbr_core::scene_graph::{build_scene_graph, DetectorConfig, MatchConfig};
use dbr_core::synth::{look_at, make_scene, SceneConfig, SyntheticScene, TrajectoryStyle};

fn err(e: dbr_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn camera(scene: &SyntheticScene, angle_deg: f64, height: f64) -> SE3Pose {
    let (a, r) = (angle_deg.to_radians(), scene.config.radius);
    look_at(scene.look_at + Vector3::new(r * a.sin(), height, -r * a.cos()), scene.look_at)
}

fn to_rgba(values: impl Iterator<Item = [f64; 3]>) -> Vec<u8> {
    values.flat_map(|c| [c[0], c[1], c[2], 1.0].map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)).collect()
}

/// RGBA pixels of a `size x size` view of scene `seed` from a camera on the
/// arc at `angle_deg`, raised by `height`. With `depth` set, returns the
/// depth map in grey (near bright) instead of colour.
#[wasm_bindgen]
pub fn render_view(seed: u64, angle_deg: f64, height: f64, size: usize, depth: bool) -> Result<Vec<u8>, JsError> {
    let scene = make_scene(seed, &SceneConfig::default()).map_err(err)?;
    let k = Intrinsics::from_fov(size, size, 60.0);
    let view = scene.gt_render(&camera(&scene, angle_deg, height), &k).map_err(err)?;
    if depth {
        let (near, far) = (scene.near(), scene.far());
        Ok(to_rgba(view.depth.iter().map(|&d| {
            let g = (1.0 / d - 1.0 / far) / (1.0 / near - 1.0 / far);
            [g, g, g]
        })))
    } else {
        Ok(to_rgba(view.image.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])))
    }
}

/// Composites one ray through a Gaussian density bump: `samples` depths
/// spaced in inverse depth on `[near, far]`, density `peak * exp(-((z -
/// center) / width)^2 / 2)`. Returns rows `[z, sigma, T, w]` flattened,
/// followed by the composited depth and opacity.
#[wasm_bindgen]
pub fn ray_profile(near: f64, far: f64, samples: usize, center: f64, width: f64, peak: f64) -> Result<Vec<f64>, JsError> {
    let z = sample_depths(near, far, samples).map_err(err)?;
    let sigma: Vec<f64> = z.iter().map(|&d| peak * (-0.5 * ((d - center) / width).powi(2)).exp()).collect();
    let colors = vec![[1.0; 3]; z.len()];
    let r = RenderSample::evaluate(&z, &sigma, &colors, None).map_err(err)?;
    let mut out: Vec<f64> = (0..z.len()).flat_map(|i| [z[i], sigma[i], r.transmittance[i], r.weights[i]]).collect();
    out.push(r.depth);
    out.push(r.opacity());
    Ok(out)
}

/// Builds the covisibility graph of `views` arc views of scene `seed` and
/// returns one line per view listing neighbours by inlier count.
#[wasm_bindgen]
pub fn scene_graph(seed: u64, views: usize, size: usize) -> Result<String, JsError> {
    let scene = make_scene(seed, &SceneConfig::default()).map_err(err)?;
    let poses = scene.sample_trajectory(views, TrajectoryStyle::Arc).map_err(err)?;
    let k = Intrinsics::from_fov(size, size, 60.0);
    let images = poses.iter().map(|p| scene.gt_render(p, &k).map(|v| v.image)).collect::<Result<Vec<_>, _>>().map_err(err)?;
    let (graph, _) = build_scene_graph(&images, &k, &DetectorConfig::default(), &MatchConfig::default()).map_err(err)?;
    Ok(graph
        .neighbors
        .iter()
        .enumerate()
        .map(|(i, list)| {
            let items: Vec<String> = list.iter().map(|(j, c)| format!("{j} ({c})")).collect();
            format!("view {i}: {}\n", if items.is_empty() { "isolated".to_string() } else { items.join(", ") })
        })
        .collect())
}
