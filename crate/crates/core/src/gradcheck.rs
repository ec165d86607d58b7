//! Finite-difference check of the complete training gradient (rasterizer,
//! tone mapper and losses together) on a small fixed scene.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::ImageF;
use crate::losses::LossWeights;
use crate::rasterizer::{Camera, RenderOptions};
use crate::scene::{sh::ShLayout, Gaussian4DCloud};
use crate::tonemap::{CellKind, ToneMapperState};
use crate::trainer::{compute_step, Model, ParamGroup, StepSettings, View};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub gaussians: usize,
    pub size: usize,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// At most this many entries per group are checked.
    pub max_per_group: usize,
    pub seed: u64,
    /// Test hook: negate the analytic gradient of one group.
    pub wrong_sign: Option<ParamGroup>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            gaussians: 5,
            size: 8,
            step: 1e-4,
            tolerance: 1e-3,
            floor: 1e-4,
            max_per_group: 400,
            seed: 7,
            wrong_sign: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub group: ParamGroup,
    pub checked: usize,
    pub total: usize,
    /// Max of `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// Entries whose central interval straddles a ReLU or L1 kink; these are
    /// scored against the one-sided difference on the smooth side instead.
    pub kinks: usize,
    pub max_abs_grad: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn failed_groups(&self) -> Vec<&'static str> {
        self.groups.iter().filter(|g| !g.passed).map(|g| g.group.name()).collect()
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<12} {:>8} {:>8} {:>6} {:>12} {:>12}  status\n",
            "group", "checked", "total", "kinks", "max_rel_err", "max_|grad|"
        );
        for g in &self.groups {
            s.push_str(&format!(
                "{:<12} {:>8} {:>8} {:>6} {:>12.3e} {:>12.3e}  {}\n",
                g.group.name(),
                g.checked,
                g.total,
                g.kinks,
                g.max_rel_err,
                g.max_abs_grad,
                if g.passed { "ok" } else { "FAIL" }
            ));
        }
        s.push_str(&format!("elapsed {:.2} s\n", self.seconds));
        s
    }
}

struct Fixture {
    model: Model,
    camera: Camera,
    ldr_gt: ImageF,
    hdr_gt: ImageF,
    settings: StepSettings,
}

impl Fixture {
    fn view(&self) -> View<'_> {
        View {
            camera: &self.camera,
            t: 0.45,
            time_index: 1,
            exposure: 2.0,
            ldr_gt: &self.ldr_gt,
            hdr_gt: Some(&self.hdr_gt),
        }
    }
}

fn fixture(opts: &GradcheckOptions) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let layout = ShLayout::new(2, 2);
    let mut cloud = Gaussian4DCloud::empty(layout);
    for _ in 0..opts.gaussians {
        let mut q = || std::array::from_fn::<f64, 4, _>(|k| if k == 0 { 1.0 } else { 0.0 } + rng.random_range(-0.4..0.4));
        let (ql, qr) = (q(), q());
        let mean = [
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.5..0.5),
            rng.random_range(0.3..0.6),
        ];
        let scale = [
            rng.random_range(0.2..0.45),
            rng.random_range(0.2..0.45),
            rng.random_range(0.2..0.45),
            rng.random_range(0.3..0.6),
        ];
        let mut sh = vec![0.0; layout.coeffs_per_gaussian()];
        for v in sh.iter_mut() {
            *v = rng.random_range(-0.15..0.15);
        }
        for c in 0..3 {
            sh[layout.index(0, 0, c)] = rng.random_range(0.3..1.5);
        }
        let opacity = rng.random_range(0.3..0.8);
        cloud.push(mean, scale, ql, qr, opacity, &sh);
    }
    let mut tone = ToneMapperState::new(vec![0.0, 0.5, 1.0], 0.9, CellKind::Gru, 2, 2, &mut rng);
    for i in 0..3 {
        let sig = std::array::from_fn(|_| rng.random_range(0.2..1.0));
        tone.bank.update(i, sig)?;
    }
    let n = opts.size * opts.size * 3;
    let ldr: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let hdr: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
    let camera = Camera::look_at([0.0, -3.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], opts.size as f64 * 1.1, opts.size, opts.size);
    let mut settings = StepSettings {
        weights: LossWeights::default(),
        pixel_level: true,
        options: RenderOptions::default(),
        hdr_bounds: None,
    };
    let mut fx = Fixture {
        model: Model { cloud, tone },
        camera,
        ldr_gt: ImageF::from_data(opts.size, opts.size, ldr)?,
        hdr_gt: ImageF::from_data(opts.size, opts.size, hdr)?,
        settings: settings.clone(),
    };
    // The μ-law normalization bounds are detached in the gradient, so the
    // numeric side must hold them fixed too.
    let base = compute_step(&fx.model, &fx.view(), &fx.settings)?;
    settings.hdr_bounds = base.hdr_bounds;
    fx.settings = settings;
    Ok(fx)
}

/// Runs the check over every parameter group.
pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut fx = fixture(opts)?;
    let base = compute_step(&fx.model, &fx.view(), &fx.settings)?;
    let (f0, analytic) = (base.total, base.grad);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xfd);
    let mut groups = Vec::new();
    for g in ParamGroup::ALL {
        let mut grad = analytic.group_flat(g);
        if opts.wrong_sign == Some(g) {
            grad.iter_mut().for_each(|v| *v = -*v);
        }
        let total = grad.len();
        let picks: Vec<usize> = if total <= opts.max_per_group {
            (0..total).collect()
        } else {
            let mut v = sample(&mut rng, total, opts.max_per_group).into_vec();
            // Always include the largest entry so a sign error cannot hide.
            let top = (0..total).max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs())).unwrap();
            if !v.contains(&top) {
                v[0] = top;
            }
            v.sort_unstable();
            v
        };
        let mut max_rel: f64 = 0.0;
        let mut kinks = 0;
        for &i in &picks {
            let orig = *fx.model.param_mut(g, i).expect("index in range");
            *fx.model.param_mut(g, i).unwrap() = orig + opts.step;
            let up = compute_step(&fx.model, &fx.view(), &fx.settings)?.total;
            *fx.model.param_mut(g, i).unwrap() = orig - opts.step;
            let down = compute_step(&fx.model, &fx.view(), &fx.settings)?.total;
            *fx.model.param_mut(g, i).unwrap() = orig;
            let a = grad[i];
            let rel_to = |n: f64| (a - n).abs() / a.abs().max(n.abs()).max(opts.floor);
            let mut rel = rel_to((up - down) / (2.0 * opts.step));
            if rel >= opts.tolerance {
                let one_sided = rel_to((up - f0) / opts.step).min(rel_to((f0 - down) / opts.step));
                if one_sided < opts.tolerance {
                    kinks += 1;
                    rel = one_sided;
                }
            }
            max_rel = max_rel.max(rel);
        }
        let max_abs_grad = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        groups.push(GroupResult {
            group: g,
            checked: picks.len(),
            total,
            max_rel_err: max_rel,
            kinks,
            max_abs_grad,
            passed: max_rel < opts.tolerance && max_abs_grad > 0.0,
        });
    }
    Ok(GradcheckReport {
        groups,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_preset_passes() {
        let r = run(&GradcheckOptions::default()).unwrap();
        assert!(r.passed(), "{}", r.render());
        let names: Vec<&str> = r.groups.iter().map(|g| g.group.name()).collect();
        assert_eq!(names, ["position", "scaling", "rotation", "opacity", "sh", "tone_curves", "drcl"]);
    }

    #[test]
    fn wrong_sign_is_caught() {
        let opts = GradcheckOptions {
            wrong_sign: Some(ParamGroup::Opacity),
            max_per_group: 40,
            ..GradcheckOptions::default()
        };
        let r = run(&opts).unwrap();
        assert_eq!(r.failed_groups(), vec!["opacity"]);
    }
}


