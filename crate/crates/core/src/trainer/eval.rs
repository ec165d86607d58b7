use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use super::{train, Model, TrainConfig};
use crate::datagen::{Dataset, Split};
use crate::error::{Error, Result};
use crate::image::{self, ImageF};
use crate::losses::{self, LossWeights};
use crate::rasterizer::{self, RenderMode, RenderOptions, ToneInput};
use crate::tonemap::CellKind;

pub const EVAL_HEADER: &str = "scene,frame,domain,psnr,ssim";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub scene: String,
    pub frame: String,
    /// `ldr` or `hdr_mu`.
    pub domain: &'static str,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub ldr_psnr: f64,
    pub ldr_ssim: f64,
    /// NaN when the dataset has no HDR ground truth.
    pub hdr_psnr: f64,
    pub hdr_ssim: f64,
    /// LDR renders per second of wall-clock time.
    pub fps: f64,
    pub frames: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.filter(|v| !v.is_nan()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(EVAL_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{:.6},{:.6}\n", r.scene, r.frame, r.domain, r.psnr, r.ssim));
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "frames {}\nldr_psnr {:.4}\nldr_ssim {:.6}\nhdr_mu_psnr {:.4}\nhdr_mu_ssim {:.6}\nfps {:.3}\n",
            self.frames, self.ldr_psnr, self.ldr_ssim, self.hdr_psnr, self.hdr_ssim, self.fps
        )
    }
}

/// Renders every frame of `split` and scores LDR and μ-law HDR renders.
pub fn evaluate(model: &Model, ds: &Dataset, split: Split, options: &RenderOptions) -> Result<EvalReport> {
    let m = &ds.manifest;
    let mu = LossWeights::default().mu;
    let mut rows = Vec::new();
    let mut hdr_cache: HashMap<String, (f64, f64)> = HashMap::new();
    let mut render_seconds = 0.0;
    let mut frames = 0;
    for f in m.frames.iter().filter(|f| f.split == split) {
        let gt = image::read_png(&ds.path(&f.ldr_path))?;
        let tone = ToneInput {
            state: &model.tone,
            time_index: f.time_index,
            exposure: f.exposure,
        };
        let start = Instant::now();
        let ldr = rasterizer::render(&model.cloud, Some(tone), &f.camera, f.time, RenderMode::Ldr3d, options)?;
        render_seconds += start.elapsed().as_secs_f64();
        frames += 1;
        rows.push(EvalRow {
            scene: m.scene.clone(),
            frame: f.id.clone(),
            domain: "ldr",
            psnr: losses::psnr_capped(&ldr, &gt)?,
            ssim: losses::ssim(&ldr, &gt)?,
        });
        let (psnr, ssim) = match &f.hdr_path {
            Some(p) => match hdr_cache.get(p) {
                Some(&v) => v,
                None => {
                    let gt = image::read_pfm(&ds.path(p))?;
                    let pred = rasterizer::render(&model.cloud, None, &f.camera, f.time, RenderMode::Hdr, options)?;
                    let v = hdr_metrics(&pred, &gt, mu)?;
                    hdr_cache.insert(p.clone(), v);
                    v
                }
            },
            None => (f64::NAN, f64::NAN),
        };
        rows.push(EvalRow {
            scene: m.scene.clone(),
            frame: f.id.clone(),
            domain: "hdr_mu",
            psnr,
            ssim,
        });
    }
    let pick = |d: &str, psnr: bool| {
        mean(
            rows.iter()
                .filter(|r| r.domain == d)
                .map(|r| if psnr { r.psnr } else { r.ssim }),
        )
    };
    Ok(EvalReport {
        ldr_psnr: pick("ldr", true),
        ldr_ssim: pick("ldr", false),
        hdr_psnr: pick("hdr_mu", true),
        hdr_ssim: pick("hdr_mu", false),
        fps: if render_seconds > 0.0 { frames as f64 / render_seconds } else { f64::NAN },
        frames,
        rows,
    })
}

/// PSNR and SSIM after μ-law compression of both images.
pub fn hdr_metrics(pred: &ImageF, gt: &ImageF, mu: f64) -> Result<(f64, f64)> {
    let a = losses::mu_law(pred, mu);
    let b = losses::mu_law(gt, mu);
    Ok((losses::psnr_capped(&a, &b)?, losses::ssim(&a, &b)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    CellKind,
    Window,
    PixelLevel,
    Supervision,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [
        AblationAxis::CellKind,
        AblationAxis::Window,
        AblationAxis::PixelLevel,
        AblationAxis::Supervision,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::CellKind => "cell_kind",
            AblationAxis::Window => "k",
            AblationAxis::PixelLevel => "pixel_level",
            AblationAxis::Supervision => "supervision",
        }
    }

    /// Named config variants along this axis, everything else from `base`.
    pub fn variants(self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationAxis::CellKind => [CellKind::Gru, CellKind::Rnn]
                .into_iter()
                .map(|k| (k.name().to_string(), with(&|c| c.cell_kind = k)))
                .collect(),
            AblationAxis::Window => [5, 10, 20, 30]
                .into_iter()
                .map(|k| (k.to_string(), with(&|c| c.window = k)))
                .collect(),
            AblationAxis::PixelLevel => [("on", true), ("off", false)]
                .into_iter()
                .map(|(n, on)| (n.to_string(), with(&|c| c.pixel_level_supervision = on)))
                .collect(),
            AblationAxis::Supervision => {
                let alpha = if base.alpha > 0.0 { base.alpha } else { LossWeights::default().alpha };
                vec![
                    ("ldr".to_string(), with(&|c| c.alpha = 0.0)),
                    ("ldr+hdr".to_string(), with(&|c| c.alpha = alpha)),
                ]
            }
        }
    }
}

impl FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s || (s == "window" && *a == AblationAxis::Window))
            .ok_or_else(|| Error::Config(format!("unknown ablation axis '{s}' (cell_kind|k|pixel_level|supervision)")))
    }
}

pub const ABLATION_HEADER: &str =
    "axis,variant,seed,dataset_sha256,config_sha256,iterations,train_seconds,final_loss,ldr_psnr,ldr_ssim,hdr_mu_psnr,hdr_mu_ssim";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: &'static str,
    pub variant: String,
    pub seed: u64,
    pub dataset_hash: String,
    pub config_hash: String,
    pub iterations: u64,
    pub train_seconds: f64,
    /// Mean total loss over the last logging window.
    pub final_loss: f64,
    pub ldr_psnr: f64,
    pub ldr_ssim: f64,
    pub hdr_psnr: f64,
    pub hdr_ssim: f64,
}

impl AblationRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3},{:.6},{:.4},{:.6},{:.4},{:.6}",
            self.axis,
            self.variant,
            self.seed,
            self.dataset_hash,
            self.config_hash,
            self.iterations,
            self.train_seconds,
            self.final_loss,
            self.ldr_psnr,
            self.ldr_ssim,
            self.hdr_psnr,
            self.hdr_ssim
        )
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Trains and evaluates one variant per axis value, all from the same seed
/// and dataset. Each variant's outputs go to `out_dir/<axis>_<variant>`.
pub fn ablate(ds: &Dataset, base: &TrainConfig, axes: &[AblationAxis], out_dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    let dataset_hash = ds.hash()?;
    let mut rows = Vec::new();
    for &axis in axes {
        for (variant, cfg) in axis.variants(base) {
            log::info!("ablation {}={variant}", axis.name());
            let dir = out_dir.map(|d| d.join(format!("{}_{}", axis.name(), variant.replace('+', "_"))));
            let outcome = train(ds, &cfg, dir.as_deref())?;
            let opts = RenderOptions {
                background: cfg.background,
                ..RenderOptions::default()
            };
            let report = evaluate(&outcome.state.model, ds, Split::Test, &opts)?;
            rows.push(AblationRow {
                axis: axis.name(),
                variant,
                seed: cfg.seed,
                dataset_hash: dataset_hash.clone(),
                config_hash: cfg.hash(),
                iterations: cfg.iterations,
                train_seconds: outcome.seconds,
                final_loss: outcome.log.last().map_or(f64::NAN, |r| r.loss_total),
                ldr_psnr: report.ldr_psnr,
                ldr_ssim: report.ldr_ssim,
                hdr_psnr: report.hdr_psnr,
                hdr_ssim: report.hdr_ssim,
            });
        }
    }
    Ok(rows)
}
