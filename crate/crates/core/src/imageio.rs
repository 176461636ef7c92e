//! RGB images in `[0,1]` and their file formats: 8-bit PNG, ASCII PPM, and
//! 16-bit grayscale PNG depth maps with a scale sidecar.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{read_poses, SE3Pose};

/// Row-major interleaved RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Luma with Rec. 601 weights.
    pub fn gray(&self) -> Vec<f64> {
        self.data.chunks_exact(3).map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]).collect()
    }

    /// `[h,w,3]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, 3], self.data.clone()).expect("image buffer size")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w, 3] | [1, h, w, 3] => Ok(Self { width: *w, height: *h, data: t.data().to_vec() }),
            s => Err(Error::Shape(format!("image tensor must be [h,w,3], got {s:?}"))),
        }
    }

    fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .ok_or_else(|| Error::Image { path: path.into(), message: "buffer size".into() })?;
        buf.save(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Ok(Self { width: w as usize, height: h as usize, data: rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect() })
    }

    /// Plain-text `P3` PPM with maxval 255.
    pub fn to_ppm(&self) -> String {
        let mut s = format!("P3\n{} {}\n255\n", self.width, self.height);
        for row in self.to_u8().chunks(self.width * 3) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_ppm(text: &str, source_name: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("");
            tokens.extend(line.split_whitespace().map(|t| (ln + 1, t)));
        }
        let mut it = tokens.into_iter();
        let mut next = |what: &str| it.next().ok_or_else(|| Error::parse(source_name, 0, format!("missing {what}")));
        let (ln, magic) = next("magic")?;
        if magic != "P3" {
            return Err(Error::parse(source_name, ln, format!("expected P3, found {magic}")));
        }
        let mut num = |what: &str| -> Result<usize> {
            let (ln, t) = next(what)?;
            t.parse().map_err(|_| Error::parse(source_name, ln, format!("bad {what} '{t}'")))
        };
        let (w, h, max) = (num("width")?, num("height")?, num("maxval")?);
        if max == 0 || max > 65535 {
            return Err(Error::parse(source_name, 0, format!("maxval {max} out of range")));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for _ in 0..w * h * 3 {
            data.push(num("sample")? as f64 / max as f64);
        }
        Ok(Self { width: w, height: h, data })
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&text, &path.display().to_string())
    }
}

/// Writes metric depth as a 16-bit grayscale PNG, `value = round(depth * scale)`,
/// clamped to `[0, 65535]`; invalid pixels become 0. The scale goes into
/// `<path>.txt` as `scale <value>`. Returns the sidecar path.
pub fn save_depth_png(path: &Path, width: usize, height: usize, depth: &[f64], scale: f64) -> Result<PathBuf> {
    let raw: Vec<u16> = depth
        .iter()
        .map(|&d| if d.is_finite() && d > 0.0 { (d * scale).round().clamp(1.0, 65535.0) as u16 } else { 0 })
        .collect();
    let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| Error::Image { path: path.into(), message: "buffer size".into() })?;
    buf.save(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })?;
    let sidecar = sidecar_path(path);
    let note = format!("# depth = pixel_value / scale (scene units); 0 marks invalid pixels\nscale {scale}\n");
    std::fs::write(&sidecar, note).map_err(|e| Error::io(&sidecar, e))?;
    Ok(sidecar)
}

pub fn load_depth_png(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let sidecar = sidecar_path(path);
    let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let mut scale = None;
    for (ln, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        if parts.next() == Some("scale") {
            let v = parts.next().and_then(|v| v.parse::<f64>().ok());
            scale = Some(v.ok_or_else(|| Error::parse(sidecar.display().to_string(), ln + 1, "bad scale"))?);
        }
    }
    let scale = scale.ok_or_else(|| Error::parse(sidecar.display().to_string(), 0, "missing scale"))?;
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })?;
    let g = img.to_luma16();
    let (w, h) = g.dimensions();
    let depth = g.into_raw().into_iter().map(|v| if v == 0 { f64::INFINITY } else { v as f64 / scale }).collect();
    Ok((w as usize, h as usize, depth))
}

/// Views read from a capture directory: `images/*.{png,ppm}` in name order
/// plus an optional `poses.txt` in the 3x4 pose format.
#[derive(Clone, Debug)]
pub struct ImageFolder {
    pub names: Vec<String>,
    pub images: Vec<Image>,
    pub poses: Option<Vec<SE3Pose>>,
}

/// Minimal reader for forward-facing captures laid out like the output of
/// `make-scene`. Meant for demos; nothing downstream assumes real data.
pub fn load_image_folder(dir: &Path) -> Result<ImageFolder> {
    let img_dir = dir.join("images");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&img_dir)
        .map_err(|e| Error::io(&img_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Image { path: img_dir, message: "no png or ppm images".into() });
    }
    let mut images = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = if p.extension().is_some_and(|e| e == "ppm") { Image::load_ppm(p)? } else { Image::load(p)? };
        if let Some(first) = images.first().map(|i: &Image| (i.width, i.height)) {
            if first != (img.width, img.height) {
                return Err(Error::Image { path: p.clone(), message: format!("size {}x{} differs from {}x{}", img.width, img.height, first.0, first.1) });
            }
        }
        images.push(img);
    }
    let pose_path = dir.join("poses.txt");
    let poses = if pose_path.exists() { Some(read_poses(&pose_path)?) } else { None };
    if let Some(p) = &poses {
        if p.len() != images.len() {
            return Err(Error::Shape(format!("{} poses for {} images in {}", p.len(), images.len(), dir.display())));
        }
    }
    let names = paths.iter().map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned()).collect();
    Ok(ImageFolder { names, images, poses })
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}
