//! Synthetic dynamic HDR scenes, simulated multi-exposure capture, and
//! dataset writing.
//!
//! The default scene ("two-sphere") is a radiance-50 emitter orbiting a
//! dim Lambertian sphere. Shading is direct light only with no shadows cast
//! by other geometry, on a black background.

mod manifest;

use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub use manifest::{Dataset, FrameRecord, HdrRecord, Manifest, Split, MANIFEST_FILE, MANIFEST_VERSION};

use crate::error::{Error, Result};
use crate::image::{self, ImageF};
use crate::par;
use crate::rasterizer::Camera;

pub const GAMMA: f64 = 2.2;
pub const DEFAULT_EXPOSURES: [f64; 3] = [0.125, 2.0, 32.0];

pub const EMITTER_RADIANCE: f64 = 50.0;
pub const DIFFUSE_PEAK: f64 = 5e-3;
const AMBIENT: f64 = 0.1;
const DIFFUSE_RADIUS: f64 = 0.5;
const DIFFUSE_ALBEDO: [f64; 3] = [1.0, 0.7, 0.4];
const EMITTER_RADIUS: f64 = 0.25;
const ORBIT_RADIUS: f64 = 1.2;
const ORBIT_PHASE: f64 = 0.3;
const RING_RADIUS: f64 = 3.2;
const RING_HEIGHT: f64 = 0.8;
const FOCAL_SCALE: f64 = 0.9;
/// Sub-pixel sample offsets (2×2 supersampling).
const SUBSAMPLES: [f64; 2] = [0.25, 0.75];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    TwoSphere,
}

impl SceneKind {
    pub fn name(self) -> &'static str {
        match self {
            SceneKind::TwoSphere => "two-sphere",
        }
    }
}

impl FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-sphere" => Ok(SceneKind::TwoSphere),
            _ => Err(Error::Config(format!("unknown scene '{s}' (available: two-sphere)"))),
        }
    }
}

/// Capture pattern: every exposure per (camera, t), or one cycling exposure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Stereo,
    Monocular,
}

impl Pattern {
    pub fn name(self) -> &'static str {
        match self {
            Pattern::Stereo => "stereo",
            Pattern::Monocular => "monocular",
        }
    }

    /// Exposure indices captured for `(camera, time_index)` out of `p` exposures.
    pub fn exposure_indices(self, camera: usize, time_index: usize, p: usize) -> Vec<usize> {
        match self {
            Pattern::Stereo => (0..p).collect(),
            Pattern::Monocular => vec![(time_index + camera) % p],
        }
    }
}

impl FromStr for Pattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stereo" => Ok(Pattern::Stereo),
            "monocular" => Ok(Pattern::Monocular),
            _ => Err(Error::Config(format!("unknown pattern '{s}' (stereo|monocular)"))),
        }
    }
}

/// A (camera, time) pair is held out when `(t + stride·camera) % modulus == residue`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPolicy {
    pub modulus: usize,
    pub residue: usize,
    pub stride: usize,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        Self {
            modulus: 7,
            residue: 3,
            stride: 3,
        }
    }
}

impl SplitPolicy {
    pub fn split(&self, camera: usize, time_index: usize) -> Split {
        if self.modulus > 0 && (time_index + self.stride * camera) % self.modulus == self.residue {
            Split::Test
        } else {
            Split::Train
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub timesteps: usize,
    pub cameras: usize,
    pub exposures: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub pattern: Pattern,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            kind: SceneKind::TwoSphere,
            timesteps: 20,
            cameras: 5,
            exposures: DEFAULT_EXPOSURES.to_vec(),
            width: 64,
            height: 64,
            pattern: Pattern::Stereo,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps < 2 {
            return Err(Error::Config("scene needs at least 2 timesteps".into()));
        }
        if self.cameras < 1 {
            return Err(Error::Config("scene needs at least 1 camera".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.exposures.is_empty() {
            return Err(Error::Config("exposure set is empty".into()));
        }
        for (i, &e) in self.exposures.iter().enumerate() {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::InvalidExposure(e));
            }
            if self.exposures[..i].contains(&e) {
                return Err(Error::Config(format!("exposure {e} listed twice")));
            }
        }
        Ok(())
    }

    pub fn time(&self, index: usize) -> f64 {
        index as f64 / (self.timesteps - 1) as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.timesteps).map(|i| self.time(i)).collect()
    }

    /// Camera `index` on a ring around the origin, looking at the origin (z up).
    pub fn camera(&self, index: usize) -> Camera {
        self.camera_at(2.0 * std::f64::consts::PI * index as f64 / self.cameras as f64)
    }

    /// Ring camera at azimuth `phi` radians.
    pub fn camera_at(&self, phi: f64) -> Camera {
        let eye = [RING_RADIUS * phi.cos(), RING_RADIUS * phi.sin(), RING_HEIGHT];
        let focal = FOCAL_SCALE * self.width.max(self.height) as f64;
        Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], focal, self.width, self.height)
    }

    /// Axis-aligned box containing all scene geometry over the whole clip.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let r = ORBIT_RADIUS + EMITTER_RADIUS;
        let z = DIFFUSE_RADIUS.max(EMITTER_RADIUS);
        ([-r, -r, -z], [r, r, z])
    }
}

/// Emitter centre at normalized time `t`.
pub fn emitter_center(t: f64) -> Vector3<f64> {
    let theta = ORBIT_PHASE + std::f64::consts::PI * t;
    Vector3::new(ORBIT_RADIUS * theta.cos(), ORBIT_RADIUS * theta.sin(), 0.0)
}

/// Nearest positive hit distance of a unit ray against a sphere.
fn hit_sphere(origin: &Vector3<f64>, dir: &Vector3<f64>, center: &Vector3<f64>, radius: f64) -> Option<f64> {
    let oc = origin - center;
    let b = oc.dot(dir);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t0 = -b - s;
    if t0 > 0.0 {
        return Some(t0);
    }
    let t1 = -b + s;
    (t1 > 0.0).then_some(t1)
}

/// Two-sphere radiance along one ray at time `t`.
pub fn trace(origin: &Vector3<f64>, dir: &Vector3<f64>, t: f64) -> [f64; 3] {
    let light = emitter_center(t);
    let hit_e = hit_sphere(origin, dir, &light, EMITTER_RADIUS);
    let hit_d = hit_sphere(origin, dir, &Vector3::zeros(), DIFFUSE_RADIUS);
    match (hit_e, hit_d) {
        (Some(te), Some(td)) if te <= td => [EMITTER_RADIANCE; 3],
        (Some(_), None) => [EMITTER_RADIANCE; 3],
        (_, Some(td)) => {
            let p = origin + dir * td;
            let n = p / DIFFUSE_RADIUS;
            let to_light = light - p;
            let d = to_light.norm();
            let cos = (n.dot(&to_light) / d).max(0.0);
            let d_min = ORBIT_RADIUS - DIFFUSE_RADIUS;
            let shade = AMBIENT + (1.0 - AMBIENT) * cos * (d_min / d).powi(2);
            DIFFUSE_ALBEDO.map(|a| DIFFUSE_PEAK * a * shade)
        }
        (None, None) => [0.0; 3],
    }
}

/// Ground-truth linear radiance image (2×2 supersampled).
pub fn render_hdr_gt(spec: &SceneSpec, camera: &Camera, t: f64) -> ImageF {
    let (w, h) = (camera.width, camera.height);
    let origin = camera.center();
    let rows = par::map_range(h, |y| {
        let mut row = Vec::with_capacity(w * 3);
        for x in 0..w {
            let mut acc = [0.0; 3];
            for sy in SUBSAMPLES {
                for sx in SUBSAMPLES {
                    let dir = camera.ray_dir(x as f64 + sx, y as f64 + sy);
                    let r = match spec.kind {
                        SceneKind::TwoSphere => trace(&origin, &dir, t),
                    };
                    for c in 0..3 {
                        acc[c] += r[c];
                    }
                }
            }
            row.extend(acc.map(|v| v / 4.0));
        }
        row
    });
    ImageF {
        width: w,
        height: h,
        data: rows.concat(),
    }
}

/// Simulated camera response: 8-bit code for sensor exposure `radiance·e`.
pub fn crf_code(radiance: f64, e: f64) -> u8 {
    let x = (radiance * e).max(0.0);
    image::quantize8(x.powf(1.0 / GAMMA).clamp(0.0, 1.0))
}

/// Radiance estimate from an 8-bit code (exact inverse off the clip).
pub fn inverse_crf(code: u8, e: f64) -> f64 {
    (code as f64 / 255.0).powf(GAMMA) / e
}

/// Width in radiance of the quantization bin around `code` at exposure `e`.
pub fn quantization_step(code: u8, e: f64) -> f64 {
    let lo = ((code as f64 - 0.5).max(0.0) / 255.0).powf(GAMMA);
    let hi = ((code as f64 + 0.5).min(255.0) / 255.0).powf(GAMMA);
    (hi - lo) / e
}

/// Applies the CRF to every channel; returns codes as an 8-bit buffer.
pub fn apply_crf(hdr: &ImageF, e: f64) -> Result<Vec<u8>> {
    if !(e > 0.0) {
        return Err(Error::InvalidExposure(e));
    }
    Ok(hdr.data.iter().map(|&v| crf_code(v, e)).collect())
}

/// Renders the dataset to `out_dir` and writes `manifest.json`.
pub fn write_dataset(spec: &SceneSpec, out_dir: &Path, with_hdr: bool, split: SplitPolicy) -> Result<Manifest> {
    spec.validate()?;
    let ldr_dir = out_dir.join("ldr");
    fs::create_dir_all(&ldr_dir).map_err(|e| Error::io(&ldr_dir, e))?;
    if with_hdr {
        let hdr_dir = out_dir.join("hdr");
        fs::create_dir_all(&hdr_dir).map_err(|e| Error::io(&hdr_dir, e))?;
    }

    let views: Vec<(usize, usize)> = (0..spec.cameras)
        .flat_map(|c| (0..spec.timesteps).map(move |ti| (c, ti)))
        .collect();
    let mut frames = Vec::new();
    let mut hdr_frames = Vec::new();
    for &(cam, ti) in &views {
        let camera = spec.camera(cam);
        let t = spec.time(ti);
        let hdr = render_hdr_gt(spec, &camera, t);
        let tag = split.split(cam, ti);
        let hdr_path = with_hdr.then(|| format!("hdr/c{cam:02}_t{ti:03}.pfm"));
        if let Some(rel) = &hdr_path {
            image::write_pfm(&out_dir.join(rel), &hdr)?;
            hdr_frames.push(HdrRecord {
                id: format!("c{cam:02}_t{ti:03}"),
                camera_index: cam,
                time_index: ti,
                time: t,
                hdr_path: rel.clone(),
                split: tag,
                camera: camera.clone(),
            });
        }
        for ei in spec.pattern.exposure_indices(cam, ti, spec.exposures.len()) {
            let e = spec.exposures[ei];
            let codes = apply_crf(&hdr, e)?;
            let ldr = ImageF::from_rgb8(hdr.width, hdr.height, &codes)?;
            let rel = format!("ldr/c{cam:02}_t{ti:03}_e{ei}.png");
            image::write_png(&out_dir.join(&rel), &ldr)?;
            frames.push(FrameRecord {
                id: format!("c{cam:02}_t{ti:03}_e{ei}"),
                camera_index: cam,
                time_index: ti,
                time: t,
                exposure: e,
                exposure_index: ei,
                ldr_path: rel,
                hdr_path: hdr_path.clone(),
                split: tag,
                camera: camera.clone(),
            });
        }
    }

    let (bounds_min, bounds_max) = spec.bounds();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        scene: spec.kind.name().to_string(),
        pattern: spec.pattern.name().to_string(),
        width: spec.width,
        height: spec.height,
        times: spec.times(),
        exposures: spec.exposures.clone(),
        cameras: spec.cameras,
        bounds_min,
        bounds_max,
        frames,
        hdr_frames,
    };
    let path = out_dir.join(MANIFEST_FILE);
    image::write_bytes(&path, manifest.to_json()?.as_bytes())?;
    Ok(manifest)
}
