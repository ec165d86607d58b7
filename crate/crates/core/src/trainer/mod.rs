//! Joint optimization of the 4D gaussian cloud and the tone mapper.
//!
//! Each step renders the sampled view twice from one prepared frame: once
//! with tone-mapped per-gaussian colours (the final LDR output) and once in
//! HDR, which feeds the pixel-level tone-mapping path and the optional HDR
//! loss. One tape sweep covers both tone-mapping passes; the splat gradients
//! of the two composites are summed before the analytic scene backward.

mod adam;
mod checkpoint;
mod config;
mod eval;

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, adam_step_slices, AdamHyper, Moments};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::TrainConfig;
pub use eval::{
    ablate, ablation_csv, evaluate, hdr_metrics, AblationAxis, AblationRow, EvalReport, EvalRow, ABLATION_HEADER,
    EVAL_HEADER,
};

use crate::datagen::{Dataset, Split};
use crate::error::{Error, Result};
use crate::image::{self, ImageF};
use crate::losses::{self, LossWeights};
use crate::rasterizer::{composite, composite_backward, prepare, prepared_backward, Camera, RenderOptions};
use crate::scene::{sh::ShLayout, CloudGrad, Gaussian4DCloud, InitSpec};
use crate::tonemap::{radiance_signature, Tensor, ToneGraph, ToneGrad, ToneGroup, ToneMapperState};

/// Trainable parameter groups, each with its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Position,
    Scaling,
    Rotation,
    Opacity,
    Sh,
    ToneCurves,
    Drcl,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Position,
        ParamGroup::Scaling,
        ParamGroup::Rotation,
        ParamGroup::Opacity,
        ParamGroup::Sh,
        ParamGroup::ToneCurves,
        ParamGroup::Drcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::Scaling => "scaling",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Opacity => "opacity",
            ParamGroup::Sh => "sh",
            ParamGroup::ToneCurves => "tone_curves",
            ParamGroup::Drcl => "drcl",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }

    fn tone_group(self) -> Option<ToneGroup> {
        match self {
            ParamGroup::ToneCurves => Some(ToneGroup::ToneCurves),
            ParamGroup::Drcl => Some(ToneGroup::Drcl),
            _ => None,
        }
    }

    pub fn learning_rate(self, cfg: &TrainConfig, iteration: u64) -> f64 {
        match self {
            ParamGroup::Position => cfg.position_lr(iteration),
            ParamGroup::Scaling => cfg.lr_scaling,
            ParamGroup::Rotation => cfg.lr_rotation,
            ParamGroup::Opacity => cfg.lr_opacity,
            ParamGroup::Sh => cfg.lr_sh,
            ParamGroup::ToneCurves => cfg.lr_tone_curves,
            ParamGroup::Drcl => cfg.lr_drcl,
        }
    }
}

/// Scene plus tone mapper.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cloud: Gaussian4DCloud,
    pub tone: ToneMapperState,
}

impl Model {
    /// Random initialization inside an axis-aligned box.
    pub fn init(cfg: &TrainConfig, bounds_min: [f64; 3], bounds_max: [f64; 3], times: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let volume: f64 = (0..3).map(|a| (bounds_max[a] - bounds_min[a]).max(1e-6)).product();
        let spec = InitSpec {
            count: cfg.init_gaussians,
            bounds_min,
            bounds_max,
            spatial_scale: cfg.init_scale_factor * (volume / cfg.init_gaussians as f64).cbrt(),
            temporal_scale: cfg.init_temporal_scale,
            opacity: cfg.init_opacity,
            dc_jitter: cfg.init_dc_jitter,
        };
        let layout = ShLayout::new(cfg.sh_degree, cfg.fourier_order);
        let cloud = Gaussian4DCloud::random(&spec, layout, &mut rng);
        let tone = ToneMapperState::new(
            times,
            cfg.bank_momentum,
            cfg.cell_kind,
            cfg.context_dim,
            cfg.window,
            &mut rng,
        );
        Ok(Self { cloud, tone })
    }

    pub fn group_len(&self, g: ParamGroup) -> usize {
        self.group_slices(g).iter().map(|s| s.len()).sum()
    }

    pub fn group_slices(&self, g: ParamGroup) -> Vec<&[f64]> {
        let c = &self.cloud;
        match g {
            ParamGroup::Position => vec![c.mean4.as_flattened()],
            ParamGroup::Scaling => vec![c.log_scale4.as_flattened()],
            ParamGroup::Rotation => vec![c.quat_left.as_flattened(), c.quat_right.as_flattened()],
            ParamGroup::Opacity => vec![&c.raw_opacity[..]],
            ParamGroup::Sh => vec![&c.sh[..]],
            ParamGroup::ToneCurves | ParamGroup::Drcl => {
                let tg = g.tone_group();
                self.tone
                    .params()
                    .into_iter()
                    .filter(|(x, _)| Some(*x) == tg)
                    .map(|(_, t)| &t.data[..])
                    .collect()
            }
        }
    }

    pub fn group_slices_mut(&mut self, g: ParamGroup) -> Vec<&mut [f64]> {
        let c = &mut self.cloud;
        match g {
            ParamGroup::Position => vec![c.mean4.as_flattened_mut()],
            ParamGroup::Scaling => vec![c.log_scale4.as_flattened_mut()],
            ParamGroup::Rotation => vec![c.quat_left.as_flattened_mut(), c.quat_right.as_flattened_mut()],
            ParamGroup::Opacity => vec![&mut c.raw_opacity[..]],
            ParamGroup::Sh => vec![&mut c.sh[..]],
            ParamGroup::ToneCurves | ParamGroup::Drcl => {
                let tg = g.tone_group();
                self.tone
                    .params_mut()
                    .into_iter()
                    .filter(|(x, _)| Some(*x) == tg)
                    .map(|(_, t)| &mut t.data[..])
                    .collect()
            }
        }
    }

    /// Mutable reference to element `index` of the flattened group.
    pub fn param_mut(&mut self, g: ParamGroup, mut index: usize) -> Option<&mut f64> {
        for s in self.group_slices_mut(g) {
            if index < s.len() {
                return Some(&mut s[index]);
            }
            index -= s.len();
        }
        None
    }

    /// Refreshes every bank entry from the current cloud (the warm-up pass).
    pub fn warm_bank(&mut self) -> Result<()> {
        for i in 0..self.tone.bank.len() {
            let sig = radiance_signature(&self.cloud, self.tone.bank.times[i])?;
            self.tone.bank.update(i, sig)?;
        }
        Ok(())
    }

    pub fn refresh_bank(&mut self, index: usize) -> Result<()> {
        let t = self.tone.bank.times.get(index).copied().ok_or_else(|| {
            Error::contract(format!("bank index {index} out of range"))
        })?;
        let sig = radiance_signature(&self.cloud, t)?;
        self.tone.bank.update(index, sig)
    }
}

/// Gradient of the full training objective.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub cloud: CloudGrad,
    pub tone: ToneGrad,
}

impl Gradient {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            cloud: CloudGrad::zeros_like(&model.cloud),
            tone: ToneGrad::zeros_like(&model.tone),
        }
    }

    pub fn group_slices(&self, g: ParamGroup) -> Vec<&[f64]> {
        let c = &self.cloud;
        match g {
            ParamGroup::Position => vec![c.mean4.as_flattened()],
            ParamGroup::Scaling => vec![c.log_scale4.as_flattened()],
            ParamGroup::Rotation => vec![c.quat_left.as_flattened(), c.quat_right.as_flattened()],
            ParamGroup::Opacity => vec![&c.raw_opacity[..]],
            ParamGroup::Sh => vec![&c.sh[..]],
            ParamGroup::ToneCurves | ParamGroup::Drcl => {
                let tg = g.tone_group();
                self.tone
                    .tensors
                    .iter()
                    .zip(&self.tone.groups)
                    .filter(|(_, x)| Some(**x) == tg)
                    .map(|(t, _)| &t.data[..])
                    .collect()
            }
        }
    }

    pub fn group_flat(&self, g: ParamGroup) -> Vec<f64> {
        self.group_slices(g).concat()
    }

    /// First group holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .find(|&g| self.group_slices(g).iter().any(|s| s.iter().any(|v| !v.is_finite())))
    }
}

/// Adam state for every group.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub hyper: AdamHyper,
    /// Number of applied (not skipped) steps.
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl Optimizer {
    pub fn new(model: &Model, hyper: AdamHyper) -> Self {
        Self {
            hyper,
            step: 0,
            moments: ParamGroup::ALL.iter().map(|&g| Moments::zeros(model.group_len(g))).collect(),
        }
    }

    /// Updates every group, or nothing if any gradient entry is non-finite.
    pub fn apply(&mut self, model: &mut Model, grad: &Gradient, lrs: &[f64; 7]) -> Result<()> {
        if let Some(g) = grad.first_non_finite() {
            return Err(Error::NonFiniteGradient {
                group: g.name().to_string(),
            });
        }
        let step = self.step + 1;
        for (k, g) in ParamGroup::ALL.into_iter().enumerate() {
            let mut params = model.group_slices_mut(g);
            let grads = grad.group_slices(g);
            adam_step_slices(&mut params, &grads, &mut self.moments[k], lrs[k], &self.hyper, step, g.name())?;
        }
        self.step = step;
        Ok(())
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Optimizer,
    /// Completed iterations (including skipped ones).
    pub iteration: u64,
    pub skipped: u64,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Self {
        let hyper = AdamHyper {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        };
        let optimizer = Optimizer::new(&model, hyper);
        Self {
            model,
            optimizer,
            iteration: 0,
            skipped: 0,
        }
    }

    /// Applies one optimizer step for the current iteration. A non-finite
    /// gradient skips the step and is counted; returns whether it applied.
    pub fn apply(&mut self, grad: &Gradient, cfg: &TrainConfig) -> Result<bool> {
        let lrs = ParamGroup::ALL.map(|g| g.learning_rate(cfg, self.iteration));
        let applied = match self.optimizer.apply(&mut self.model, grad, &lrs) {
            Ok(()) => true,
            Err(Error::NonFiniteGradient { group }) => {
                log::warn!("iteration {}: non-finite gradient in {group}, step skipped", self.iteration);
                self.skipped += 1;
                false
            }
            Err(e) => return Err(e),
        };
        self.iteration += 1;
        Ok(applied)
    }
}

/// Loss settings for one step.
#[derive(Clone, Debug)]
pub struct StepSettings {
    pub weights: LossWeights,
    pub pixel_level: bool,
    pub options: RenderOptions,
    /// Fixed μ-law bounds for the HDR prediction (gradient checks only).
    pub hdr_bounds: Option<(f64, f64)>,
}

impl StepSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            weights: cfg.loss_weights(),
            pixel_level: cfg.pixel_level_supervision,
            options: RenderOptions {
                background: cfg.background,
                ..RenderOptions::default()
            },
            hdr_bounds: None,
        }
    }
}

/// One supervised view.
#[derive(Clone, Copy)]
pub struct View<'a> {
    pub camera: &'a Camera,
    pub t: f64,
    pub time_index: usize,
    pub exposure: f64,
    pub ldr_gt: &'a ImageF,
    /// Only given when the HDR term is active.
    pub hdr_gt: Option<&'a ImageF>,
}

pub struct StepOutput {
    pub total: f64,
    pub ldr: f64,
    pub hdr: f64,
    pub ldr_3d: ImageF,
    /// μ-law bounds of the HDR prediction when the HDR term was evaluated.
    pub hdr_bounds: Option<(f64, f64)>,
    pub grad: Gradient,
}

fn rows3(t: &Tensor) -> Vec<[f64; 3]> {
    t.data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Loss and full gradient for one view. Does not modify the model.
pub fn compute_step(model: &Model, view: &View<'_>, settings: &StepSettings) -> Result<StepOutput> {
    let opts = &settings.options;
    let frame = prepare(&model.cloud, view.camera, view.t)?;
    let n = frame.splats.len();
    let mut graph = ToneGraph::for_index(&model.tone, view.time_index)?;
    let hdr_in = graph.leaf(Tensor::from_vec(n, 3, frame.hdr_colors.as_flattened().to_vec()));
    let ldr_out = graph.tone_map(hdr_in, view.exposure)?;
    let ldr_colors = rows3(graph.tape.value(ldr_out));
    let ldr_3d = composite(&frame, &ldr_colors, opts)?;

    let use_hdr_loss = view.hdr_gt.is_some() && settings.weights.alpha > 0.0;
    let hdr_img = if settings.pixel_level || use_hdr_loss {
        Some(composite(&frame, &frame.hdr_colors, opts)?)
    } else {
        None
    };
    let image_vars = match (&hdr_img, settings.pixel_level) {
        (Some(h), true) => Some(graph.tone_map_image(h, view.exposure)?),
        _ => None,
    };
    let ldr_2d = image_vars.as_ref().map(|v| graph.image(v));
    let hdr_gt = if use_hdr_loss { view.hdr_gt } else { None };
    let hdr_pred = if use_hdr_loss { hdr_img.as_ref() } else { None };
    let loss = losses::total_loss_with(
        ldr_2d.as_ref(),
        &ldr_3d,
        view.ldr_gt,
        hdr_pred,
        hdr_gt,
        &settings.weights,
        settings.hdr_bounds,
    )?;
    let hdr_bounds = hdr_pred.map(|p| settings.hdr_bounds.unwrap_or_else(|| losses::mu_law_bounds(p)));

    let mut screen = composite_backward(&frame, &ldr_colors, &loss.d_ldr_3d, opts)?;
    let d_ldr_colors: Vec<f64> = screen.iter().flat_map(|g| g.color).collect();
    let mut seeds = vec![(ldr_out, Tensor::from_vec(n, 3, d_ldr_colors))];
    if let (Some(vars), Some(d)) = (&image_vars, &loss.d_ldr_2d) {
        seeds.push((vars.output, Tensor::from_vec(d.width * d.height, 3, d.data.clone())));
    }
    let grads = graph.tape.backward(&seeds);
    let tone = graph.param_grads(&grads);
    let mut d_hdr_colors = rows3(&grads.get_or_zeros(hdr_in, graph.tape.value(hdr_in)));

    if let Some(h) = &hdr_img {
        let mut d_img = ImageF::new(h.width, h.height);
        if let (Some(vars), Some(d)) = (&image_vars, &loss.d_ldr_2d) {
            d_img = graph.image_input_grad_from(vars, d, &grads);
        }
        if let Some(d) = &loss.d_hdr_2d {
            d_img.data.iter_mut().zip(&d.data).for_each(|(a, b)| *a += b);
        }
        let screen_hdr = composite_backward(&frame, &frame.hdr_colors, &d_img, opts)?;
        for ((s, sh), dc) in screen.iter_mut().zip(&screen_hdr).zip(d_hdr_colors.iter_mut()) {
            s.add_assign(sh);
            for c in 0..3 {
                dc[c] += sh.color[c];
            }
        }
    }
    let cloud = prepared_backward(&model.cloud, &frame, &screen, &d_hdr_colors)?;
    Ok(StepOutput {
        total: loss.total,
        ldr: loss.ldr,
        hdr: loss.hdr,
        ldr_3d,
        hdr_bounds,
        grad: Gradient { cloud, tone },
    })
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub loss_total: f64,
    pub loss_ldr: f64,
    pub loss_hdr: f64,
    pub psnr_train: f64,
}

pub const LOG_HEADER: &str = "iter,loss_total,loss_ldr,loss_hdr,psnr_train";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.4}",
            self.iter, self.loss_total, self.loss_ldr, self.loss_hdr, self.psnr_train
        )
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    /// Rows are means over the preceding `log_every` iterations.
    pub log: Vec<LogRow>,
    /// Per-iteration total loss.
    pub losses: Vec<f64>,
    pub seconds: f64,
}

struct Sample {
    frame: usize,
    ldr: ImageF,
    hdr: Option<usize>,
}

/// Loads the LDR images of one split, and their HDR images when `with_hdr`.
fn load_samples(ds: &Dataset, split: Split, with_hdr: bool) -> Result<(Vec<Sample>, Vec<ImageF>)> {
    let mut samples = Vec::new();
    let mut hdr_images = Vec::new();
    let mut hdr_paths: Vec<String> = Vec::new();
    for (i, f) in ds.manifest.frames.iter().enumerate() {
        if f.split != split {
            continue;
        }
        let ldr = image::read_png(&ds.path(&f.ldr_path))?;
        let hdr = match (&f.hdr_path, with_hdr) {
            (Some(p), true) => Some(match hdr_paths.iter().position(|q| q == p) {
                Some(k) => k,
                None => {
                    hdr_images.push(image::read_pfm(&ds.path(p))?);
                    hdr_paths.push(p.clone());
                    hdr_images.len() - 1
                }
            }),
            _ => None,
        };
        samples.push(Sample { frame: i, ldr, hdr });
    }
    Ok((samples, hdr_images))
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LOG_FILE: &str = "train_log.csv";

/// Trains from scratch. With `out_dir`, writes the log, periodic
/// checkpoints and `final.ckpt` there.
pub fn train(ds: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let m = &ds.manifest;
    // HDR files are only read when the HDR term can contribute.
    let with_hdr = cfg.alpha > 0.0;
    let (samples, hdr_images) = load_samples(ds, Split::Train, with_hdr)?;
    if samples.is_empty() {
        return Err(Error::Manifest("no training frames".into()));
    }
    let model = Model::init(cfg, m.bounds_min, m.bounds_max, m.times.clone())?;
    let mut state = TrainState::new(model, cfg);
    state.model.warm_bank()?;
    let settings = StepSettings::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f4a3_e5);

    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(LOG_FILE);
            let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&p, e))?;
            Some((f, p))
        }
        None => None,
    };

    let start = Instant::now();
    let mut log = Vec::new();
    let mut losses_all = Vec::with_capacity(cfg.iterations as usize);
    let mut acc = [0.0; 4];
    let mut acc_n = 0u64;
    while state.iteration < cfg.iterations {
        let s = &samples[rng.random_range(0..samples.len())];
        let f = &m.frames[s.frame];
        state.model.refresh_bank(f.time_index)?;
        let view = View {
            camera: &f.camera,
            t: f.time,
            time_index: f.time_index,
            exposure: f.exposure,
            ldr_gt: &s.ldr,
            hdr_gt: s.hdr.map(|k| &hdr_images[k]),
        };
        let out = compute_step(&state.model, &view, &settings)?;
        let psnr = losses::psnr_capped(&out.ldr_3d, &s.ldr)?;
        state.apply(&out.grad, cfg)?;
        losses_all.push(out.total);
        for (a, v) in acc.iter_mut().zip([out.total, out.ldr, out.hdr, psnr]) {
            *a += v;
        }
        acc_n += 1;
        if state.iteration % cfg.log_every == 0 || state.iteration == cfg.iterations {
            let k = acc_n as f64;
            let row = LogRow {
                iter: state.iteration,
                loss_total: acc[0] / k,
                loss_ldr: acc[1] / k,
                loss_hdr: acc[2] / k,
                psnr_train: acc[3] / k,
            };
            log::info!(
                "iter {:>6}  loss {:.5}  ldr {:.5}  hdr {:.5}  psnr {:.2} dB  ({:.1} s)",
                row.iter,
                row.loss_total,
                row.loss_ldr,
                row.loss_hdr,
                row.psnr_train,
                start.elapsed().as_secs_f64()
            );
            if let Some((file, p)) = log_file.as_mut() {
                writeln!(file, "{}", row.csv()).map_err(|e| Error::io(&*p, e))?;
            }
            log.push(row);
            acc = [0.0; 4];
            acc_n = 0;
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0
                && state.iteration % cfg.checkpoint_every == 0
                && state.iteration < cfg.iterations
            {
                let ck = Checkpoint::new(cfg.clone(), state.clone());
                ck.save(&dir.join(format!("checkpoint_{:06}.ckpt", state.iteration)))?;
            }
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        Checkpoint::new(cfg.clone(), state.clone()).save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        state,
        log,
        losses: losses_all,
        seconds,
    })
}
