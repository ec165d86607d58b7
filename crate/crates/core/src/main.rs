use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use hdrsplat::datagen::{self, Dataset, Pattern, SceneKind, SceneSpec, Split, SplitPolicy};
use hdrsplat::gradcheck::{self, GradcheckOptions};
use hdrsplat::rasterizer::{self, Camera, RenderMode, RenderOptions, ToneInput};
use hdrsplat::trainer::{self, AblationAxis, Checkpoint, ParamGroup, TrainConfig};
use hdrsplat::{image, losses, Error, ImageF};

macro_rules! out {
    ($($t:tt)*) => { emit(&format!($($t)*)) };
}

macro_rules! outln {
    () => { emit("\n") };
    ($($t:tt)*) => { emit(&(format!($($t)*) + "\n")) };
}

/// Writes to stdout; a closed pipe (e.g. `| head`) ends the process quietly.
fn emit(s: &str) {
    use std::io::Write;
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = stdout.write_all(s.as_bytes()).and_then(|_| stdout.flush()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
    }
}

/// CPU 4D Gaussian splatting with a learned dynamic tone mapper.
///
/// Every flag of a subcommand can also be set in the `--config` TOML file:
/// training keys at the top level (see `TrainConfig`), the other subcommands
/// in a table named after the subcommand, with underscores in place of
/// dashes. Flags take precedence over the file.
#[derive(Parser)]
#[command(name = "hdrsplat", version)]
struct Cli {
    /// Random seed (training, initialization, gradcheck fixture).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log level filter (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic multi-exposure dataset.
    Datagen(DatagenArgs),
    /// Train from scratch on a dataset.
    Train(TrainArgs),
    /// Render images from a checkpoint.
    Render(RenderArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Finite-difference check of every gradient.
    Gradcheck(GradcheckArgs),
    /// Time renders at several thread counts.
    Bench(BenchArgs),
    /// Train and score one run per ablation variant.
    Ablate(AblateArgs),
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct DatagenArgs {
    /// Scene name (two-sphere).
    #[arg(long)]
    scene: Option<String>,
    /// Exposure pattern: stereo or monocular.
    #[arg(long)]
    pattern: Option<String>,
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    cameras: Option<usize>,
    /// Image width and height.
    #[arg(long)]
    size: Option<usize>,
    /// Comma-separated exposure times in seconds.
    #[arg(long, value_delimiter = ',')]
    exposures: Option<Vec<f64>>,
    /// Also write HDR ground truth.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    with_hdr: Option<bool>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct TrainArgs {
    /// Dataset directory or manifest.json.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for logs and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<u64>,
    /// Weight of the HDR term (0 for LDR-only supervision).
    #[arg(long)]
    alpha: Option<f64>,
    /// SSIM weight inside the reconstruction loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Recurrent cell: gru or rnn.
    #[arg(long)]
    cell_kind: Option<String>,
    /// Context window length k.
    #[arg(long)]
    window: Option<usize>,
    /// Supervise the tone-mapped HDR render per pixel.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pixel_level_supervision: Option<bool>,
    #[arg(long)]
    init_gaussians: Option<usize>,
    #[arg(long)]
    log_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Set any training key, e.g. `--set lr_sh=1e-3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    #[serde(skip)]
    set: Vec<String>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset used to look up frames and cameras.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Render one manifest frame by id.
    #[arg(long)]
    frame: Option<String>,
    /// Render every frame of a split (train or test).
    #[arg(long)]
    split: Option<String>,
    /// Camera index on the dataset ring (or the default ring without --data).
    #[arg(long)]
    camera_index: Option<usize>,
    /// Timestamp; values outside [0, 1] are clamped.
    #[arg(long)]
    t: Option<f64>,
    /// Exposure time for LDR renders.
    #[arg(long)]
    exposure: Option<f64>,
    /// hdr, ldr or both.
    #[arg(long)]
    mode: Option<String>,
    /// Image size for the default ring camera.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// train or test.
    #[arg(long)]
    split: Option<String>,
    /// Per-frame metrics CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct GradcheckArgs {
    /// default (every entry up to 400 per group) or quick (40 per group).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    gaussians: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    max_per_group: Option<usize>,
    /// Test hook: negate the analytic gradient of this group.
    #[arg(long)]
    wrong_sign: Option<String>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset whose first test frame sets the camera.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Renders per thread count (at least 20).
    #[arg(long)]
    frames: Option<usize>,
    /// Comma-separated thread counts.
    #[arg(long, value_delimiter = ',')]
    threads: Option<Vec<usize>>,
    /// hdr or ldr.
    #[arg(long)]
    mode: Option<String>,
    /// Image size when no dataset is given.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct AblateArgs {
    /// Axes to sweep: cell_kind, k, pixel_level, supervision (default all).
    #[arg(long, value_delimiter = ',')]
    axis: Option<Vec<String>>,
    /// CSV with one row per variant (default <out>/ablation.csv).
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    #[serde(skip)]
    train: TrainArgs,
}

enum Failure {
    Usage(String),
    Verify(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            e => Failure::Lib(e),
        }
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Verify(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Lib(Error::Io { .. } | Error::Format { .. } | Error::Manifest(_) | Error::Checkpoint(_) | Error::Json(_)) => 3,
            Failure::Lib(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => format!("usage error: {m}"),
            Failure::Verify(m) => format!("verification failed: {m}"),
            Failure::Lib(e) => format!("error: {e}"),
        }
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}

fn load_file(path: Option<&Path>) -> Result<toml::Table, Failure> {
    let Some(path) = path else {
        return Ok(toml::Table::new());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::Lib(Error::io(path, e)))?;
    text.parse::<toml::Table>()
        .map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Overlays the flags that were given onto the file values.
fn resolve<T: Serialize + DeserializeOwned>(flags: &T, mut base: toml::Table, what: &str) -> Result<T, Failure> {
    let given = toml::Table::try_from(flags).map_err(|e| usage(e.to_string()))?;
    base.extend(given);
    toml::Value::Table(base)
        .try_into()
        .map_err(|e| usage(format!("{what}: {e}")))
}

fn section(file: &toml::Table, name: &str) -> Result<toml::Table, Failure> {
    match file.get(name) {
        None => Ok(toml::Table::new()),
        Some(toml::Value::Table(t)) => Ok(t.clone()),
        Some(_) => Err(usage(format!("config key '{name}' must be a table"))),
    }
}

const SECTIONS: [&str; 6] = ["datagen", "render", "eval", "gradcheck", "bench", "ablate"];

fn train_config(file: &toml::Table, flags: &TrainArgs, seed: Option<u64>) -> Result<TrainConfig, Failure> {
    let mut table: toml::Table = file
        .iter()
        .filter(|(k, _)| !SECTIONS.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    table.extend(toml::Table::try_from(flags).map_err(|e| usage(e.to_string()))?);
    for kv in &flags.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        let value = format!("x = {v}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("x"))
            .unwrap_or_else(|| toml::Value::String(v.to_string()));
        table.insert(k.trim().to_string(), value);
    }
    if let Some(s) = seed {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    let cfg: TrainConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| usage(format!("training config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn require<T>(v: Option<T>, flag: &str) -> Result<T, Failure> {
    v.ok_or_else(|| usage(format!("--{flag} is required")))
}

fn parse_split(s: &str) -> Result<Split, Failure> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(usage(format!("unknown split '{s}' (train|test)"))),
    }
}

fn run(cli: Cli) -> Outcome {
    let file = load_file(cli.config.as_deref())?;
    match &cli.command {
        Command::Datagen(a) => datagen_cmd(resolve(a, section(&file, "datagen")?, "datagen")?, cli.seed),
        Command::Train(a) => train_cmd(train_config(&file, a, cli.seed)?),
        Command::Render(a) => render_cmd(resolve(a, section(&file, "render")?, "render")?),
        Command::Eval(a) => eval_cmd(resolve(a, section(&file, "eval")?, "eval")?),
        Command::Gradcheck(a) => {
            let seed = cli.seed.or(file.get("seed").and_then(|v| v.as_integer()).map(|v| v as u64));
            gradcheck_cmd(resolve(a, section(&file, "gradcheck")?, "gradcheck")?, seed)
        }
        Command::Bench(a) => bench_cmd(resolve(a, section(&file, "bench")?, "bench")?),
        Command::Ablate(a) => {
            let cfg = train_config(&file, &a.train, cli.seed)?;
            ablate_cmd(resolve(a, section(&file, "ablate")?, "ablate")?, cfg)
        }
    }
}

fn datagen_cmd(a: DatagenArgs, seed: Option<u64>) -> Outcome {
    let d = SceneSpec::default();
    let size = a.size.unwrap_or(d.width);
    let spec = SceneSpec {
        kind: a.scene.as_deref().unwrap_or("two-sphere").parse::<SceneKind>()?,
        pattern: a.pattern.as_deref().unwrap_or("stereo").parse::<Pattern>()?,
        timesteps: a.timesteps.unwrap_or(d.timesteps),
        cameras: a.cameras.unwrap_or(d.cameras),
        exposures: a.exposures.unwrap_or(d.exposures),
        width: size,
        height: size,
    };
    if seed.is_some() {
        log::info!("the two-sphere scene is analytic; --seed does not change it");
    }
    let out = require(a.out, "out")?;
    let m = datagen::write_dataset(&spec, &out, a.with_hdr.unwrap_or(false), SplitPolicy::default())?;
    let tests = m.frames_in(Split::Test).count();
    outln!(
        "wrote {} LDR frames ({} train, {} test) and {} HDR frames to {}",
        m.frames.len(),
        m.frames.len() - tests,
        tests,
        m.hdr_frames.len(),
        out.display()
    );
    Ok(())
}

fn open_dataset(path: Option<&Path>) -> Result<Dataset, Failure> {
    Ok(Dataset::load(require(path, "data")?)?)
}

fn train_cmd(cfg: TrainConfig) -> Outcome {
    let ds = open_dataset(cfg.data.as_deref())?;
    let out = trainer::train(&ds, &cfg, cfg.out.as_deref())?;
    let last = out.log.last();
    outln!(
        "trained {} iterations in {:.1} s (skipped {}), final loss {:.5}, train psnr {:.2} dB",
        out.state.iteration,
        out.seconds,
        out.state.skipped,
        last.map_or(f64::NAN, |r| r.loss_total),
        last.map_or(f64::NAN, |r| r.psnr_train)
    );
    if let Some(dir) = &cfg.out {
        outln!("checkpoint {}", dir.join(trainer::FINAL_CHECKPOINT).display());
    }
    Ok(())
}

struct RenderJob {
    name: String,
    camera: Camera,
    t: f64,
    exposure: f64,
}

fn render_cmd(a: RenderArgs) -> Outcome {
    let ck = Checkpoint::load(&require(a.checkpoint.clone(), "checkpoint")?)?;
    let model = ck.model();
    let mode = a.mode.as_deref().unwrap_or("both");
    let (hdr, ldr) = match mode {
        "hdr" => (true, false),
        "ldr" => (false, true),
        "both" => (true, true),
        m => return Err(usage(format!("unknown mode '{m}' (hdr|ldr|both)"))),
    };
    let clamp = |t: f64| {
        let c = t.clamp(0.0, 1.0);
        if c != t {
            log::warn!("t = {t} is outside [0, 1]; clamped to {c}");
        }
        c
    };
    let ds = a.data.as_deref().map(Dataset::load).transpose()?;
    let mut jobs = Vec::new();
    if let Some(id) = &a.frame {
        let ds = ds.as_ref().ok_or_else(|| usage("--frame needs --data"))?;
        let f = ds.manifest.frames.iter().find(|f| &f.id == id).ok_or_else(|| usage(format!("no frame '{id}'")))?;
        jobs.push(RenderJob {
            name: f.id.clone(),
            camera: f.camera.clone(),
            t: f.time,
            exposure: a.exposure.unwrap_or(f.exposure),
        });
    } else if let Some(s) = &a.split {
        let split = parse_split(s)?;
        let ds = ds.as_ref().ok_or_else(|| usage("--split needs --data"))?;
        for f in ds.manifest.frames_in(split) {
            jobs.push(RenderJob {
                name: f.id.clone(),
                camera: f.camera.clone(),
                t: f.time,
                exposure: a.exposure.unwrap_or(f.exposure),
            });
        }
    } else {
        let q = a.camera_index.unwrap_or(0);
        let camera = match &ds {
            Some(ds) => ds
                .manifest
                .frames
                .iter()
                .find(|f| f.camera_index == q)
                .map(|f| f.camera.clone())
                .ok_or_else(|| usage(format!("camera index {q} out of range")))?,
            None => {
                let size = a.size.unwrap_or(64);
                let spec = SceneSpec {
                    width: size,
                    height: size,
                    cameras: SceneSpec::default().cameras.max(q + 1),
                    ..SceneSpec::default()
                };
                spec.camera(q)
            }
        };
        let t = clamp(a.t.unwrap_or(0.0));
        jobs.push(RenderJob {
            name: format!("c{q:02}_t{t:.4}"),
            camera,
            t,
            exposure: a.exposure.unwrap_or(2.0),
        });
    }
    let out = a.out.unwrap_or_else(|| PathBuf::from("renders"));
    fs::create_dir_all(&out).map_err(|e| Failure::Lib(Error::io(&out, e)))?;
    let opts = RenderOptions {
        background: ck.config.background,
        ..RenderOptions::default()
    };
    let mut written = 0;
    for job in &jobs {
        if hdr {
            let img = rasterizer::render(&model.cloud, None, &job.camera, job.t, RenderMode::Hdr, &opts)?;
            image::write_pfm(&out.join(format!("{}_hdr.pfm", job.name)), &img)?;
            let preview = losses::mu_law(&img, ck.config.mu);
            image::write_png(&out.join(format!("{}_hdr_mu.png", job.name)), &preview)?;
            written += 2;
        }
        if ldr {
            let tone = ToneInput {
                state: &model.tone,
                time_index: model.tone.bank.nearest_index(job.t),
                exposure: job.exposure,
            };
            let img = rasterizer::render(&model.cloud, Some(tone), &job.camera, job.t, RenderMode::Ldr3d, &opts)?;
            image::write_png(&out.join(format!("{}_ldr.png", job.name)), &img)?;
            written += 1;
        }
    }
    outln!("rendered {} views, {written} files in {}", jobs.len(), out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let ck = Checkpoint::load(&require(a.checkpoint, "checkpoint")?)?;
    let ds = open_dataset(a.data.as_deref())?;
    let split = parse_split(a.split.as_deref().unwrap_or("test"))?;
    let opts = RenderOptions {
        background: ck.config.background,
        ..RenderOptions::default()
    };
    let report = trainer::evaluate(ck.model(), &ds, split, &opts)?;
    if let Some(p) = &a.out {
        image::write_bytes(p, report.to_csv().as_bytes())?;
    } else {
        out!("{}", report.to_csv());
    }
    out!("{}", report.summary());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs, seed: Option<u64>) -> Outcome {
    let mut opts = GradcheckOptions::default();
    match a.preset.as_deref().unwrap_or("default") {
        "default" => {}
        "quick" => opts.max_per_group = 40,
        p => return Err(usage(format!("unknown preset '{p}' (default|quick)"))),
    }
    opts.gaussians = a.gaussians.unwrap_or(opts.gaussians);
    opts.size = a.size.unwrap_or(opts.size);
    opts.step = a.step.unwrap_or(opts.step);
    opts.tolerance = a.tolerance.unwrap_or(opts.tolerance);
    opts.max_per_group = a.max_per_group.unwrap_or(opts.max_per_group);
    opts.seed = seed.unwrap_or(opts.seed);
    if let Some(g) = &a.wrong_sign {
        opts.wrong_sign = Some(ParamGroup::from_name(g).ok_or_else(|| usage(format!("unknown group '{g}'")))?);
    }
    let report = gradcheck::run(&opts)?;
    out!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verify(format!("groups {}", report.failed_groups().join(", "))))
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn bench_cmd(a: BenchArgs) -> Outcome {
    let ck = Checkpoint::load(&require(a.checkpoint, "checkpoint")?)?;
    let model = ck.model();
    let frames = a.frames.unwrap_or(20);
    if frames < 20 {
        return Err(usage("--frames must be at least 20"));
    }
    let mode = match a.mode.as_deref().unwrap_or("ldr") {
        "hdr" => RenderMode::Hdr,
        "ldr" => RenderMode::Ldr3d,
        m => return Err(usage(format!("unknown mode '{m}' (hdr|ldr)"))),
    };
    let (camera, t, exposure) = match a.data.as_deref() {
        Some(p) => {
            let ds = Dataset::load(p)?;
            let f = ds
                .manifest
                .frames_in(Split::Test)
                .next()
                .or(ds.manifest.frames.first())
                .ok_or_else(|| Failure::Lib(Error::Manifest("dataset has no frames".into())))?;
            (f.camera.clone(), f.time, f.exposure)
        }
        None => {
            let size = a.size.unwrap_or(64);
            let spec = SceneSpec {
                width: size,
                height: size,
                ..SceneSpec::default()
            };
            (spec.camera(0), 0.5, 2.0)
        }
    };
    let tone = ToneInput {
        state: &model.tone,
        time_index: model.tone.bank.nearest_index(t),
        exposure,
    };
    let opts = RenderOptions {
        background: ck.config.background,
        ..RenderOptions::default()
    };
    let render = || rasterizer::render(&model.cloud, Some(tone), &camera, t, mode, &opts);
    outln!(
        "size {}x{}  gaussians {}  mode {}  frames {}",
        camera.width,
        camera.height,
        model.cloud.len(),
        if mode == RenderMode::Hdr { "hdr" } else { "ldr" },
        frames
    );
    outln!("{:>8} {:>12} {:>10}", "threads", "median_ms", "fps");
    let mut reference: Option<ImageF> = None;
    for &n in a.threads.as_deref().unwrap_or(&[1, 8]) {
        if n == 0 {
            return Err(usage("thread counts must be positive"));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| usage(e.to_string()))?;
        let (img, times) = pool.install(|| -> Result<(ImageF, Vec<f64>), Error> {
            let img = render()?;
            let mut times = Vec::with_capacity(frames);
            for _ in 0..frames {
                let start = Instant::now();
                std::hint::black_box(render()?);
                times.push(start.elapsed().as_secs_f64());
            }
            Ok((img, times))
        })?;
        let med = median(times);
        outln!("{n:>8} {:>12.3} {:>10.2}", med * 1e3, 1.0 / med);
        match &reference {
            None => reference = Some(img),
            Some(r) if *r != img => {
                return Err(Failure::Verify(format!("image rendered with {n} threads differs")));
            }
            Some(_) => {}
        }
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs, cfg: TrainConfig) -> Outcome {
    let ds = open_dataset(cfg.data.as_deref())?;
    let axes: Vec<AblationAxis> = match &a.axis {
        None => AblationAxis::ALL.to_vec(),
        Some(names) => names.iter().map(|n| n.parse()).collect::<Result<_, _>>()?,
    };
    let rows = trainer::ablate(&ds, &cfg, &axes, cfg.out.as_deref())?;
    let csv = trainer::ablation_csv(&rows);
    let path = a.csv.or_else(|| cfg.out.as_ref().map(|d| d.join("ablation.csv")));
    match path {
        Some(p) => {
            image::write_bytes(&p, csv.as_bytes())?;
            outln!("{} variants, results in {}", rows.len(), p.display());
        }
        None => out!("{csv}"),
    }
    Ok(())
}
