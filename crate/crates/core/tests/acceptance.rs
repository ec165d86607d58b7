//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Run a subset with `cargo test --release --test acceptance -- 2 3 8`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{Matrix2, Matrix3, Matrix4, SymmetricEigen, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hdrsplat::datagen::{self, Dataset, SceneSpec, Split, SplitPolicy};
use hdrsplat::losses;
use hdrsplat::rasterizer::{self, Camera, RenderMode, RenderOptions, DILATION, MAX_WEIGHT, NEAR};
use hdrsplat::scene::{self, Gaussian4DCloud, ShLayout};
use hdrsplat::tonemap::{tone_map_colors, RadianceBank, ToneCurves};
use hdrsplat::trainer::{self, Checkpoint, TrainConfig};
use hdrsplat::ImageF;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hdrsplat"))
}

// ---------------------------------------------------------------- 1

fn gradients() -> Verdict {
    let start = Instant::now();
    let out = bin()
        .args(["gradcheck", "--log", "warn"])
        .env("RAYON_NUM_THREADS", "1")
        .output()
        .expect("run hdrsplat gradcheck");
    let secs = start.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    print!("{text}");
    let groups = ["position", "scaling", "rotation", "opacity", "sh", "tone_curves", "drcl"];
    let listed = groups.iter().all(|g| text.lines().any(|l| l.starts_with(g) && l.trim_end().ends_with("ok")));
    let pass = out.status.code() == Some(0) && listed && secs < 60.0;
    verdict(pass, format!("exit {:?}, all 7 groups ok: {listed}, {secs:.1} s single-threaded", out.status.code()))
}

// ---------------------------------------------------------------- 2

fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [a0, a1, a2, a3] = a;
    let [b0, b1, b2, b3] = b;
    [
        a0 * b0 - a1 * b1 - a2 * b2 - a3 * b3,
        a0 * b1 + a1 * b0 + a2 * b3 - a3 * b2,
        a0 * b2 - a1 * b3 + a2 * b0 + a3 * b1,
        a0 * b3 + a1 * b2 - a2 * b1 + a3 * b0,
    ]
}

fn unit(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

/// 4D rotation `x ↦ ql ⊗ x ⊗ qr`, assembled column by column.
fn rotation4(ql: [f64; 4], qr: [f64; 4]) -> Matrix4<f64> {
    let (ql, qr) = (unit(ql), unit(qr));
    let mut m = Matrix4::zeros();
    for k in 0..4 {
        let mut e = [0.0; 4];
        e[k] = 1.0;
        let col = quat_mul(quat_mul(ql, e), qr);
        for r in 0..4 {
            m[(r, k)] = col[r];
        }
    }
    m
}

/// Per-pixel alpha blending over every gaussian, sorted by depth, with no
/// spatial cutoff and no early termination.
fn brute_force_render(cloud: &Gaussian4DCloud, cam: &Camera, t: f64) -> ImageF {
    let w = cam.rotation_matrix();
    let center = cam.center();
    struct G {
        depth: f64,
        mean2: Vector2<f64>,
        inv: Matrix2<f64>,
        peak: f64,
        rgb: [f64; 3],
    }
    let mut gs = Vec::new();
    for i in 0..cloud.len() {
        let r = rotation4(cloud.quat_left[i], cloud.quat_right[i]);
        let d = Matrix4::from_diagonal(&Vector4::from(cloud.log_scale4[i].map(|s| (2.0 * s).exp())));
        let cov = r * d * r.transpose();
        let mu = cloud.mean4[i];
        let stt = cov[(3, 3)];
        let dt = t - mu[3];
        let tw = (-0.5 * dt * dt / stt).exp();
        let sxt = Vector3::new(cov[(0, 3)], cov[(1, 3)], cov[(2, 3)]);
        let mean3 = Vector3::new(mu[0], mu[1], mu[2]) + sxt * (dt / stt);
        let cov3: Matrix3<f64> = cov.fixed_view::<3, 3>(0, 0).into_owned() - sxt * sxt.transpose() / stt;
        let p = w * mean3 + cam.translation_vec();
        assert!(p.z > NEAR, "oracle scenes keep every gaussian in front of the camera");
        let jac = nalgebra::Matrix2x3::new(
            cam.fx / p.z,
            0.0,
            -cam.fx * p.x / (p.z * p.z),
            0.0,
            cam.fy / p.z,
            -cam.fy * p.y / (p.z * p.z),
        );
        let m = jac * w;
        let cov2 = m * cov3 * m.transpose() + Matrix2::identity() * DILATION;
        let opacity = 1.0 / (1.0 + (-cloud.raw_opacity[i]).exp());
        let dir = (mean3 - center).normalize();
        gs.push(G {
            depth: p.z,
            mean2: Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy),
            inv: cov2.try_inverse().unwrap(),
            peak: opacity * tw,
            rgb: scene::eval_color_4dsh(cloud, i, &dir, t),
        });
    }
    gs.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    let mut img = ImageF::new(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let (mut acc, mut trans) = ([0.0; 3], 1.0);
            for g in &gs {
                let d = px - g.mean2;
                let q = (d.transpose() * g.inv * d)[(0, 0)];
                let a = (g.peak * (-0.5 * q).exp()).min(MAX_WEIGHT);
                for c in 0..3 {
                    acc[c] += g.rgb[c] * a * trans;
                }
                trans *= 1.0 - a;
            }
            img.set_pixel(x, y, acc);
        }
    }
    img
}

fn random_scene(seed: u64) -> (Gaussian4DCloud, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = ShLayout::new(2, 2);
    let mut cloud = Gaussian4DCloud::empty(layout);
    for _ in 0..10 {
        let mean = [
            rng.random_range(-0.7..0.7),
            rng.random_range(-0.7..0.7),
            rng.random_range(-0.7..0.7),
            rng.random_range(0.0..1.0),
        ];
        let scale = [
            rng.random_range(0.05..0.4),
            rng.random_range(0.05..0.4),
            rng.random_range(0.05..0.4),
            rng.random_range(0.1..0.8),
        ];
        let ql: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let qr: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let sh: Vec<f64> = (0..layout.coeffs_per_gaussian()).map(|_| rng.random_range(-0.5..0.5)).collect();
        cloud.push(mean, scale, ql, qr, rng.random_range(0.05..0.98), &sh);
    }
    (cloud, rng.random_range(0.0..1.0))
}

fn rasterizer_oracle() -> Verdict {
    let cam = Camera::look_at([0.0, -3.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], 16.0, 16, 16);
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let (cloud, t) = random_scene(seed);
        let fast = rasterizer::render(&cloud, None, &cam, t, RenderMode::Hdr, &RenderOptions::default()).unwrap();
        let slow = brute_force_render(&cloud, &cam, t);
        let diff = fast.data.iter().zip(&slow.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(diff);
    }
    verdict(worst < 1e-5, format!("max abs channel diff {worst:.3e} over 20 scenes (< 1e-5)"))
}

// ---------------------------------------------------------------- 3

fn golden_values() -> Verdict {
    let mut checks = Vec::new();
    // 1 spatial axis + time embedded in 4D: Σ_xx = 2, Σ_xt = 1, Σ_tt = 1.
    let mut cov = Matrix4::identity();
    cov[(0, 0)] = 2.0;
    cov[(0, 3)] = 1.0;
    cov[(3, 0)] = 1.0;
    cov[(3, 3)] = 1.0;
    let (m3, c3) = scene::conditional_spatial(&cov, [0.0; 4], 1.0).unwrap();
    checks.push(("conditional mean", m3.x, 1.0, 1e-12));
    checks.push(("conditional var", c3[(0, 0)], 1.0, 1e-12));
    let tw = scene::temporal_weight(&Matrix4::identity(), 0.0, 1.0).unwrap();
    checks.push(("temporal weight", tw, 0.606531, 1e-6));
    let img = ImageF::from_data(3, 1, [0.0, 0.5, 1.0].repeat(3)).unwrap();
    let mu = losses::mu_law(&img, 5000.0).data[1];
    checks.push(("mu-law(0.5)", mu, 2501f64.ln() / 5001f64.ln(), 1e-6));
    checks.push(("crf(0.5)", datagen::crf_code(0.5, 1.0) as f64, 186.0, 0.0));
    let a = ImageF::from_data(16, 16, (0..768).map(|k| ((k * 37) % 101) as f64 / 100.0).collect()).unwrap();
    checks.push(("ssim(identical)", losses::ssim(&a, &a).unwrap(), 1.0, 1e-12));
    let zero = ImageF::new(4, 4);
    let tenth = ImageF::filled(4, 4, [0.1; 3]);
    checks.push(("psnr(mse 0.01)", losses::psnr(&zero, &tenth, 1.0).unwrap(), 20.0, 1e-9));
    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want, tol)| !((got - want).abs() <= *tol))
        .map(|(n, got, want, _)| format!("{n}: {got} vs {want}"))
        .collect();
    let summary = checks.iter().map(|(n, v, ..)| format!("{n}={v:.6}")).collect::<Vec<_>>().join(", ");
    verdict(bad.is_empty(), if bad.is_empty() { summary } else { bad.join("; ") })
}

// ---------------------------------------------------------------- 4-7

struct Desk {
    _dir: tempfile::TempDir,
    ds: Dataset,
    base: TrainConfig,
}

fn desk() -> Desk {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec::default();
    datagen::write_dataset(&spec, dir.path(), true, SplitPolicy::default()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    let base = TrainConfig::load(&repo_file("configs/desk.toml")).unwrap();
    Desk { _dir: dir, ds, base }
}

fn pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

struct RunScore {
    ldr_psnr: f64,
    hdr_psnr: f64,
    seconds: f64,
}

fn train_and_score(desk: &Desk, cfg: &TrainConfig, label: &str) -> RunScore {
    let out = pool(8, || trainer::train(&desk.ds, cfg, None)).unwrap();
    let opts = RenderOptions {
        background: cfg.background,
        ..RenderOptions::default()
    };
    let r = trainer::evaluate(&out.state.model, &desk.ds, Split::Test, &opts).unwrap();
    println!(
        "    run {label}: {} iters in {:.0} s, test LDR PSNR {:.2} dB, HDR mu-law PSNR {:.2} dB",
        cfg.iterations, out.seconds, r.ldr_psnr, r.hdr_psnr
    );
    RunScore {
        ldr_psnr: r.ldr_psnr,
        hdr_psnr: r.hdr_psnr,
        seconds: out.seconds,
    }
}

fn desk_training(desk: &Desk) -> Verdict {
    let cfg = TrainConfig {
        alpha: 0.0,
        ..desk.base.clone()
    };
    let s = train_and_score(desk, &cfg, "ldr-only");
    verdict(
        s.ldr_psnr >= 22.0 && s.seconds <= 900.0,
        format!("held-out LDR PSNR {:.2} dB (>= 22) in {:.0} s (<= 900)", s.ldr_psnr, s.seconds),
    )
}

/// Shorter shared schedule for the two directional comparisons.
fn direction_config() -> TrainConfig {
    TrainConfig::load(&repo_file("configs/direction.toml")).expect("configs/direction.toml")
}

fn directions(desk: &Desk) -> (Verdict, Verdict) {
    let base = direction_config();
    let hdr_alpha = if base.alpha > 0.0 { base.alpha } else { 0.6 };
    let ldr = train_and_score(desk, &TrainConfig { alpha: 0.0, ..base.clone() }, "ldr-only, pixel-level on");
    let both = train_and_score(desk, &TrainConfig { alpha: hdr_alpha, ..base.clone() }, "ldr+hdr, pixel-level on");
    let no_px = train_and_score(
        desk,
        &TrainConfig {
            alpha: hdr_alpha,
            pixel_level_supervision: false,
            ..base
        },
        "ldr+hdr, pixel-level off",
    );
    (
        verdict(
            both.hdr_psnr > ldr.hdr_psnr,
            format!("HDR PSNR ldr+hdr {:.2} dB vs ldr-only {:.2} dB", both.hdr_psnr, ldr.hdr_psnr),
        ),
        verdict(
            both.hdr_psnr > no_px.hdr_psnr,
            format!("HDR PSNR pixel-level on {:.2} dB vs off {:.2} dB", both.hdr_psnr, no_px.hdr_psnr),
        ),
    )
}

fn ablation_harness(desk: &Desk) -> Verdict {
    let out = tempfile::tempdir().unwrap();
    let csv = out.path().join("ablation.csv");
    let status = bin()
        .args(["ablate", "--log", "warn", "--axis", "cell_kind,k", "--iterations", "20", "--init-gaussians", "300"])
        .arg("--config")
        .arg(repo_file("configs/desk.toml"))
        .arg("--data")
        .arg(&desk.ds.root)
        .arg("--csv")
        .arg(&csv)
        .status()
        .expect("run hdrsplat ablate");
    let Ok(text) = std::fs::read_to_string(&csv) else {
        return verdict(false, format!("ablate exited {:?} without a CSV", status.code()));
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let (Some(ax), Some(va), Some(se), Some(dh)) = (col("axis"), col("variant"), col("seed"), col("dataset_sha256")) else {
        return verdict(false, "CSV header is missing columns");
    };
    let got: Vec<(String, String)> = rows.iter().map(|r| (r[ax].to_string(), r[va].to_string())).collect();
    let want: Vec<(String, String)> = [("cell_kind", "gru"), ("cell_kind", "rnn"), ("k", "5"), ("k", "10"), ("k", "20"), ("k", "30")]
        .iter()
        .map(|(a, v)| (a.to_string(), v.to_string()))
        .collect();
    let shared = |c: usize| rows.windows(2).all(|w| w[0][c] == w[1][c]);
    let ok = status.success() && got == want && shared(se) && shared(dh);
    verdict(
        ok,
        format!(
            "{} rows {:?}, shared seed {}, shared dataset hash {}",
            rows.len(),
            got.iter().map(|(a, v)| format!("{a}={v}")).collect::<Vec<_>>(),
            shared(se),
            shared(dh)
        ),
    )
}

// ---------------------------------------------------------------- 8

fn exposure_product_invariance() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let curves = ToneCurves::monotone(2, &mut rng);
    let ctx = [0.3, -0.7];
    let mut compared = 0;
    for _ in 0..500 {
        let c: [f64; 3] = std::array::from_fn(|_| 10f64.powf(rng.random_range(-4.0..2.0)));
        let e = [0.125, 2.0, 32.0][rng.random_range(0..3)];
        let k = rng.random_range(0.01..100.0);
        let c2 = c.map(|v| v * k);
        let e2 = e / k;
        let same_product = (0..3).all(|i| c[i] * e == c2[i] * e2);
        if !same_product {
            continue;
        }
        let a = tone_map_colors(&curves, &[c], e, &ctx).map_err(|e| e.to_string())?;
        let b = tone_map_colors(&curves, &[c2], e2, &ctx).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("c={c:?} e={e} vs c={c2:?} e={e2}: {a:?} != {b:?}"));
        }
        compared += 1;
        let p = 2f64.powi(rng.random_range(-6..6));
        let b = tone_map_colors(&curves, &[c.map(|v| v * p)], e / p, &ctx).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("power-of-two rescale by {p} changed the output"));
        }
    }
    Ok(format!("exposure product: {compared} pairs bit-identical"))
}

fn bank_convergence() -> Result<String, String> {
    let mut bank = RadianceBank::new(vec![0.0, 1.0], 0.9);
    bank.update(0, [1.0, 0.0, 0.5]).unwrap();
    let target = [0.2, 0.9, 0.4];
    for _ in 0..100 {
        bank.update(0, target).unwrap();
    }
    let err = (0..3).map(|c| (bank.entries[0][c] - target[c]).abs()).fold(0.0, f64::max);
    if err < 1e-4 {
        Ok(format!("bank EMA error {err:.2e}"))
    } else {
        Err(format!("bank EMA error {err:.2e} after 100 updates"))
    }
}

fn covariance_psd() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut min_eig = f64::INFINITY;
    let mut asym: f64 = 0.0;
    for _ in 0..10_000 {
        let s: [f64; 4] = std::array::from_fn(|_| rng.random_range(-6.0..2.0));
        let ql: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let qr: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let cov = scene::build_covariance4(s, ql, qr).map_err(|e| e.to_string())?;
        asym = asym.max((cov - cov.transpose()).abs().max());
        let scale = cov.abs().max();
        let eig = SymmetricEigen::new(cov).eigenvalues.min() / scale.max(1.0);
        min_eig = min_eig.min(eig);
    }
    if min_eig >= -1e-9 {
        Ok(format!("PSD min eigenvalue {min_eig:.2e} (asymmetry {asym:.1e})"))
    } else {
        Err(format!("min eigenvalue {min_eig:.2e}, asymmetry {asym:.2e}"))
    }
}

fn factorization() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let s: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.5..0.5));
        let ql: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let qr: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let cov = scene::build_covariance4(s, ql, qr).map_err(|e| e.to_string())?;
        let inv = cov.try_inverse().ok_or("singular covariance")?;
        let mean: [f64; 4] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
        for _ in 0..10 {
            let x = Vector4::from(std::array::from_fn::<f64, 4, _>(|k| mean[k] + rng.random_range(-0.6..0.6)));
            let d = x - Vector4::from(mean);
            let joint = (-0.5 * (d.transpose() * inv * d)[(0, 0)]).exp();
            let tw = scene::temporal_weight(&cov, mean[3], x[3]).map_err(|e| e.to_string())?;
            let (m3, c3) = scene::conditional_spatial(&cov, mean, x[3]).map_err(|e| e.to_string())?;
            let d3 = Vector3::new(x[0], x[1], x[2]) - m3;
            let cond = (-0.5 * (d3.transpose() * c3.try_inverse().ok_or("singular conditional")? * d3)[(0, 0)]).exp();
            if joint > 1e-250 {
                worst = worst.max((tw * cond - joint).abs() / joint);
            }
        }
    }
    if worst < 1e-10 {
        Ok(format!("factorization rel err {worst:.2e}"))
    } else {
        Err(format!("factorization rel err {worst:.2e}"))
    }
}

fn determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = SceneSpec {
        timesteps: 4,
        cameras: 3,
        width: 24,
        height: 24,
        ..SceneSpec::default()
    };
    datagen::write_dataset(&spec, dir.path(), true, SplitPolicy::default()).map_err(|e| e.to_string())?;
    let ds = Dataset::load(dir.path()).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        iterations: 40,
        init_gaussians: 300,
        log_every: 10,
        checkpoint_every: 0,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = |threads: usize, name: &str| -> Result<Vec<u8>, String> {
        let out = dir.path().join(name);
        pool(threads, || trainer::train(&ds, &cfg, Some(&out))).map_err(|e| e.to_string())?;
        std::fs::read(out.join(trainer::FINAL_CHECKPOINT)).map_err(|e| e.to_string())
    };
    let a = run(1, "a")?;
    let b = run(4, "b")?;
    let reloaded = Checkpoint::from_bytes(&a).and_then(|c| c.to_bytes()).map_err(|e| e.to_string())?;
    if a == b && a == reloaded {
        Ok(format!("checkpoints bit-identical across 1 and 4 threads ({} bytes)", a.len()))
    } else {
        Err("checkpoints differ between identical runs".into())
    }
}

fn crf_consistency() -> Result<String, String> {
    let spec = SceneSpec::default();
    let mut worst: f64 = 0.0;
    let mut pairs = 0usize;
    for (q, t) in [(0, 0.0), (2, 0.4), (4, 0.9)] {
        let cam = spec.camera(q);
        let hdr = datagen::render_hdr_gt(&spec, &cam, t);
        let codes: Vec<(f64, Vec<u8>)> = spec
            .exposures
            .iter()
            .map(|&e| {
                let ldr = datagen::apply_crf(&hdr, e).unwrap();
                let img = ImageF::from_rgb8(hdr.width, hdr.height, &ldr).unwrap();
                // Through the PNG codec, as stored on disk.
                let png = hdrsplat::image::encode_png(&img).unwrap();
                let tmp = tempfile::NamedTempFile::new().unwrap();
                std::fs::write(tmp.path(), png).unwrap();
                (e, hdrsplat::image::read_png(tmp.path()).unwrap().to_rgb8())
            })
            .collect();
        for i in 0..codes.len() {
            for j in i + 1..codes.len() {
                let (ea, a) = &codes[i];
                let (eb, b) = &codes[j];
                for (&ca, &cb) in a.iter().zip(b) {
                    let unclipped = |c: u8| (1..=254).contains(&c);
                    if !unclipped(ca) || !unclipped(cb) {
                        continue;
                    }
                    let step = datagen::quantization_step(ca, *ea).max(datagen::quantization_step(cb, *eb));
                    let diff = (datagen::inverse_crf(ca, *ea) - datagen::inverse_crf(cb, *eb)).abs();
                    worst = worst.max(diff / step);
                    pairs += 1;
                }
            }
        }
    }
    if pairs > 0 && worst <= 2.0 {
        Ok(format!("CRF consistency {worst:.2} steps over {pairs} pairs"))
    } else {
        Err(format!("CRF consistency {worst:.2} steps over {pairs} pairs"))
    }
}

fn invariants() -> Verdict {
    let parts = [
        exposure_product_invariance(),
        bank_convergence(),
        covariance_psd(),
        factorization(),
        determinism(),
        crf_consistency(),
    ];
    let pass = parts.iter().all(|p| p.is_ok());
    let detail = parts
        .iter()
        .map(|p| match p {
            Ok(s) => s.clone(),
            Err(s) => format!("FAILED {s}"),
        })
        .collect::<Vec<_>>()
        .join("; ");
    verdict(pass, detail)
}

// ----------------------------------------------------------------

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let names = [
        "gradient correctness",
        "rasterizer oracle equivalence",
        "unit golden values",
        "end-to-end desk training",
        "supervision direction",
        "pixel-level supervision direction",
        "ablation harness completeness",
        "invariant suites",
    ];
    let mut results: Vec<(usize, Verdict)> = Vec::new();
    let mut report = |n: usize, v: Verdict| {
        println!("criterion {n} {}: {} ({})", names[n - 1], if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, v));
    };
    if want(1) {
        report(1, gradients());
    }
    if want(2) {
        report(2, rasterizer_oracle());
    }
    if want(3) {
        report(3, golden_values());
    }
    if want(4) || want(5) || want(6) || want(7) {
        let d = desk();
        if want(4) {
            report(4, desk_training(&d));
        }
        if want(5) || want(6) {
            let (five, six) = directions(&d);
            if want(5) {
                report(5, five);
            }
            if want(6) {
                report(6, six);
            }
        }
        if want(7) {
            report(7, ablation_harness(&d));
        }
    }
    if want(8) {
        report(8, invariants());
    }
    println!();
    for (n, v) in &results {
        println!("criterion {n}: {}", if v.pass { "PASS" } else { "FAIL" });
    }
    if results.iter().any(|(_, v)| !v.pass) {
        std::process::exit(1);
    }
}
