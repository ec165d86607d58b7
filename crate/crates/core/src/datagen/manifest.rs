//! Dataset manifest: JSON list of LDR captures and HDR ground-truth frames.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rasterizer::Camera;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One LDR observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: String,
    pub camera_index: usize,
    pub time_index: usize,
    pub time: f64,
    pub exposure: f64,
    pub exposure_index: usize,
    pub ldr_path: String,
    pub hdr_path: Option<String>,
    pub split: Split,
    pub camera: Camera,
}

/// One HDR ground-truth image (shared by every exposure of a view and time).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HdrRecord {
    pub id: String,
    pub camera_index: usize,
    pub time_index: usize,
    pub time: f64,
    pub hdr_path: String,
    pub split: Split,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub scene: String,
    pub pattern: String,
    pub width: usize,
    pub height: usize,
    /// Normalized time of each timestamp index.
    pub times: Vec<f64>,
    pub exposures: Vec<f64>,
    pub cameras: usize,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub frames: Vec<FrameRecord>,
    pub hdr_frames: Vec<HdrRecord>,
}

impl Manifest {
    /// Canonical JSON text (pretty, fixed field order, trailing newline).
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn entry_count(&self) -> usize {
        self.frames.len() + self.hdr_frames.len()
    }

    pub fn frames_in(&self, split: Split) -> impl Iterator<Item = &FrameRecord> {
        self.frames.iter().filter(move |f| f.split == split)
    }

    pub fn has_hdr(&self) -> bool {
        self.frames.iter().all(|f| f.hdr_path.is_some())
    }

    fn check(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!("unsupported manifest version {}", self.version)));
        }
        if self.times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Manifest("timestamps must be strictly increasing".into()));
        }
        if self.times.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Manifest("timestamps must lie in [0, 1]".into()));
        }
        for f in &self.frames {
            if f.time_index >= self.times.len() || f.times_mismatch(&self.times) {
                return Err(Error::Manifest(format!("frame {} has an inconsistent time", f.id)));
            }
            if !(f.exposure > 0.0) {
                return Err(Error::Manifest(format!("frame {} has a non-positive exposure", f.id)));
            }
            f.camera.validate().map_err(|e| Error::Manifest(format!("frame {}: {e}", f.id)))?;
        }
        for cam in 0..self.cameras {
            let times: Vec<f64> = self
                .frames
                .iter()
                .filter(|f| f.camera_index == cam)
                .map(|f| f.time)
                .collect();
            if times.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Manifest(format!("frames of camera {cam} are not sorted by time")));
            }
        }
        Ok(())
    }
}

impl FrameRecord {
    fn times_mismatch(&self, times: &[f64]) -> bool {
        times[self.time_index] != self.time
    }
}

/// A manifest together with the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    /// Loads `dir/manifest.json` (or a manifest file path) and checks that
    /// every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::Manifest(format!("{}: {e}", file.display())))?;
        let manifest = Manifest::from_json(&text)?;
        manifest.check()?;
        let ds = Self { root, manifest };
        for f in &ds.manifest.frames {
            ds.require(&f.ldr_path)?;
            if let Some(h) = &f.hdr_path {
                ds.require(h)?;
            }
        }
        for h in &ds.manifest.hdr_frames {
            ds.require(&h.hdr_path)?;
        }
        Ok(ds)
    }

    fn require(&self, rel: &str) -> Result<()> {
        let p = self.root.join(rel);
        if p.is_file() {
            Ok(())
        } else {
            Err(Error::Manifest(format!("missing file {}", p.display())))
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// SHA-256 over the canonical manifest and every referenced file, in
    /// manifest order, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.manifest.to_json()?.as_bytes());
        let mut files: Vec<&str> = Vec::new();
        for f in &self.manifest.frames {
            files.push(&f.ldr_path);
        }
        for r in &self.manifest.hdr_frames {
            files.push(&r.hdr_path);
        }
        for rel in files {
            let p = self.path(rel);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            h.update((rel.len() as u64).to_le_bytes());
            h.update(rel.as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}
