//! Browser demo. Every entry point returns plain numbers or RGBA bytes that
//! the page copies into a canvas.

use hdrsplat::datagen::{self, SceneSpec};
use hdrsplat::losses;
use hdrsplat::rasterizer::{self, RenderMode, RenderOptions, ToneInput};
use hdrsplat::tonemap::tone_map_colors;
use hdrsplat::trainer::{Checkpoint, Model, TrainConfig};
use hdrsplat::ImageF;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba(img: &ImageF) -> Vec<u8> {
    img.to_rgb8()
        .chunks(3)
        .flat_map(|c| [c[0], c[1], c[2], 255])
        .collect()
}

fn spec(size: usize) -> SceneSpec {
    SceneSpec {
        width: size.clamp(8, 256),
        height: size.clamp(8, 256),
        ..SceneSpec::default()
    }
}

/// Ground-truth view of the two-sphere scene. `view` is "ldr" (CRF at
/// `exposure`) or "hdr" (μ-law of the radiance).
#[wasm_bindgen]
pub fn scene_view(azimuth_deg: f64, t: f64, exposure: f64, view: &str, size: usize) -> Result<Vec<u8>, JsError> {
    let spec = spec(size);
    let cam = spec.camera_at(azimuth_deg.to_radians());
    let hdr = datagen::render_hdr_gt(&spec, &cam, t.clamp(0.0, 1.0));
    match view {
        "hdr" => Ok(rgba(&losses::mu_law(&hdr, 5000.0))),
        "ldr" => {
            let codes = datagen::apply_crf(&hdr, exposure).map_err(js_err)?;
            Ok(codes.chunks(3).flat_map(|c| [c[0], c[1], c[2], 255]).collect())
        }
        other => Err(JsError::new(&format!("unknown view '{other}'"))),
    }
}

/// Peak radiance of the ground-truth frame (for the page's readout).
#[wasm_bindgen]
pub fn scene_peak(azimuth_deg: f64, t: f64, size: usize) -> f64 {
    let spec = spec(size);
    datagen::render_hdr_gt(&spec, &spec.camera_at(azimuth_deg.to_radians()), t.clamp(0.0, 1.0)).max_value()
}

/// A 4D gaussian model (random or loaded from a checkpoint) rendered on the
/// two-sphere camera ring.
#[wasm_bindgen]
pub struct SplatViewer {
    model: Model,
    background: [f64; 3],
}

#[wasm_bindgen]
impl SplatViewer {
    /// Random initialization, as at the start of training.
    #[wasm_bindgen(js_name = random)]
    pub fn random(seed: u64, count: usize) -> Result<SplatViewer, JsError> {
        let cfg = TrainConfig {
            seed,
            init_gaussians: count.clamp(1, 20_000),
            init_opacity: 0.3,
            ..TrainConfig::default()
        };
        let s = SceneSpec::default();
        let (lo, hi) = s.bounds();
        let mut model = Model::init(&cfg, lo, hi, s.times()).map_err(js_err)?;
        model.warm_bank().map_err(js_err)?;
        Ok(SplatViewer {
            model,
            background: cfg.background,
        })
    }

    /// A trained model from the bytes of a `.ckpt` file.
    #[wasm_bindgen(js_name = fromCheckpoint)]
    pub fn from_checkpoint(bytes: &[u8]) -> Result<SplatViewer, JsError> {
        let ck = Checkpoint::from_bytes(bytes).map_err(js_err)?;
        let mut model = ck.model().clone();
        if !model.tone.bank.is_warm() {
            model.warm_bank().map_err(js_err)?;
        }
        Ok(SplatViewer {
            model,
            background: ck.config.background,
        })
    }

    pub fn gaussians(&self) -> usize {
        self.model.cloud.len()
    }

    /// `mode` is "ldr" (tone-mapped at `exposure`) or "hdr" (μ-law preview).
    pub fn render(&self, azimuth_deg: f64, t: f64, exposure: f64, mode: &str, size: usize) -> Result<Vec<u8>, JsError> {
        let cam = spec(size).camera_at(azimuth_deg.to_radians());
        let t = t.clamp(0.0, 1.0);
        let opts = RenderOptions {
            background: self.background,
            ..RenderOptions::default()
        };
        let cloud = &self.model.cloud;
        match mode {
            "hdr" => {
                let img = rasterizer::render(cloud, None, &cam, t, RenderMode::Hdr, &opts).map_err(js_err)?;
                Ok(rgba(&losses::mu_law(&img, 5000.0)))
            }
            "ldr" => {
                let tone = ToneInput {
                    state: &self.model.tone,
                    time_index: self.model.tone.bank.nearest_index(t),
                    exposure,
                };
                let img = rasterizer::render(cloud, Some(tone), &cam, t, RenderMode::Ldr3d, &opts).map_err(js_err)?;
                Ok(rgba(&img))
            }
            other => Err(JsError::new(&format!("unknown mode '{other}'"))),
        }
    }

    /// Red-channel tone curve at time `t` and `exposure`, sampled at
    /// radiances `10^x` for `x` evenly spaced over `[lo, hi]`.
    #[wasm_bindgen(js_name = toneCurve)]
    pub fn tone_curve(&self, t: f64, exposure: f64, lo: f64, hi: f64, samples: usize) -> Result<Vec<f64>, JsError> {
        let tone = &self.model.tone;
        let index = tone.bank.nearest_index(t.clamp(0.0, 1.0));
        let colors = radiance_ramp(lo, hi, samples);
        let (out, _) = hdrsplat::tonemap::dtm_apply(tone, &colors, index, exposure).map_err(js_err)?;
        Ok(out.iter().map(|c| c[0]).collect())
    }
}

fn radiance_ramp(lo: f64, hi: f64, samples: usize) -> Vec<[f64; 3]> {
    let n = samples.clamp(2, 4096);
    (0..n)
        .map(|i| [10f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64); 3])
        .collect()
}

/// Synthetic camera response at `exposure` over the same radiance ramp, for
/// comparison with a learned curve.
#[wasm_bindgen(js_name = crfCurve)]
pub fn crf_curve(exposure: f64, lo: f64, hi: f64, samples: usize) -> Vec<f64> {
    radiance_ramp(lo, hi, samples)
        .iter()
        .map(|c| datagen::crf_code(c[0], exposure) as f64 / 255.0)
        .collect()
}

/// Freshly initialized curve with an explicit context vector.
#[wasm_bindgen(js_name = initCurve)]
pub fn init_curve(seed: u64, exposure: f64, ctx0: f64, ctx1: f64, lo: f64, hi: f64, samples: usize) -> Result<Vec<f64>, JsError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let curves = hdrsplat::tonemap::ToneCurves::monotone(2, &mut rng);
    let out = tone_map_colors(&curves, &radiance_ramp(lo, hi, samples), exposure, &[ctx0, ctx1]).map_err(js_err)?;
    Ok(out.iter().map(|c| c[0]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_view_has_rgba_layout() {
        let px = scene_view(30.0, 0.5, 2.0, "ldr", 16).unwrap();
        assert_eq!(px.len(), 16 * 16 * 4);
        assert!(px.chunks(4).all(|c| c[3] == 255));
        assert!(px.chunks(4).any(|c| c[0] == 255), "emitter saturates at exposure 2");
    }

    #[test]
    fn random_viewer_renders_both_modes() {
        let v = SplatViewer::random(3, 200).unwrap();
        assert_eq!(v.gaussians(), 200);
        assert_eq!(v.render(0.0, 0.3, 2.0, "ldr", 24).unwrap().len(), 24 * 24 * 4);
        assert_eq!(v.render(0.0, 0.3, 2.0, "hdr", 24).unwrap().len(), 24 * 24 * 4);
    }

    #[test]
    fn curves_are_sampled_on_the_ramp() {
        let crf = crf_curve(1.0, -4.0, 1.0, 64);
        assert_eq!(crf.len(), 64);
        assert!(crf.windows(2).all(|w| w[0] <= w[1]));
        let init = init_curve(0, 1.0, 0.0, 0.0, -4.0, 1.0, 64).unwrap();
        assert!(init.iter().all(|v| *v > 0.0 && *v < 1.0));
        let v = SplatViewer::random(1, 50).unwrap();
        assert_eq!(v.tone_curve(0.5, 2.0, -4.0, 1.0, 32).unwrap().len(), 32);
    }
}
