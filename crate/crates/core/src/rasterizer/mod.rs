//! Time slicing, projection, depth sorting and alpha compositing of 4D
//! gaussians, with analytic gradients.
//!
//! Rendering is split into stages so training can share work between the
//! HDR and tone-mapped passes of one frame:
//!
//! 1. [`prepare`] slices every gaussian at `t`, projects it and bins the
//!    resulting splats into 16×16 tiles after a global depth sort.
//! 2. [`composite`] blends any per-splat colours front to back.
//! 3. [`composite_backward`] and [`prepared_backward`] push image gradients
//!    back to screen-space quantities and then to the raw cloud parameters.
//!
//! [`render`] and [`render_backward`] wrap the stages for a single pass.

pub mod camera;

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

pub use camera::{project, project_backward, Camera, Projection, DILATION, NEAR, PIXEL_CENTER};

use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::par;
use crate::scene::sh::{self, ColorEval};
use crate::scene::{slice_backward, slice_gaussian, CloudGrad, Gaussian4DCloud, SlicedGaussian, TEMPORAL_CULL};
use crate::tonemap::{ToneGrad, ToneGraph, ToneMapperState, Tensor, Var};

pub const TILE: usize = 16;
pub const MAX_WEIGHT: f64 = 0.99;
/// Compositing stops once transmittance drops below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-6;
/// Splat contributions below this weight are not evaluated.
pub const MIN_WEIGHT: f64 = 1e-7;
pub const MIN_DET: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    Hdr,
    Ldr3d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    pub background: [f64; 3],
    pub early_stop: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            early_stop: true,
        }
    }
}

/// One time-sliced, projected gaussian.
#[derive(Clone, Debug)]
pub struct Splat2D {
    pub gaussian: usize,
    pub depth: f64,
    pub mean2: Vector2<f64>,
    pub cov2: Matrix2<f64>,
    /// Inverse of `cov2` as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub temporal_weight: f64,
    pub opacity: f64,
    /// Mahalanobis radius² beyond which the weight is below [`MIN_WEIGHT`].
    pub q_max: f64,
}

#[derive(Clone, Debug)]
struct Aux {
    sliced: SlicedGaussian,
    proj: Projection,
    color: ColorEval,
    /// Unnormalized view direction `mean3 - camera centre`.
    view: Vector3<f64>,
}

/// Per-frame geometry shared by every compositing pass of one view.
#[derive(Clone, Debug)]
pub struct Frame {
    pub camera: Camera,
    pub t: f64,
    /// Visible splats sorted front to back (ties broken by gaussian index).
    pub splats: Vec<Splat2D>,
    /// HDR colour of each splat for this view and time.
    pub hdr_colors: Vec<[f64; 3]>,
    aux: Vec<Aux>,
    tiles_x: usize,
    tiles_y: usize,
    /// Splat indices per tile, front to back.
    bins: Vec<Vec<u32>>,
}

impl Frame {
    pub fn width(&self) -> usize {
        self.camera.width
    }

    pub fn height(&self) -> usize {
        self.camera.height
    }
}

fn slice_and_project(
    cloud: &Gaussian4DCloud,
    camera: &Camera,
    center: &Vector3<f64>,
    i: usize,
    t: f64,
) -> Result<Option<(Splat2D, Aux)>> {
    let sliced = slice_gaussian(cloud, i, t)?;
    let tw = sliced.temporal_weight;
    if tw < TEMPORAL_CULL {
        return Ok(None);
    }
    let opacity = cloud.opacity(i);
    let peak = tw * opacity;
    if peak <= MIN_WEIGHT {
        return Ok(None);
    }
    let Some(proj) = project(camera, &sliced.mean3, &sliced.cov3) else {
        return Ok(None);
    };
    let c = proj.cov2;
    let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
    if !(det >= MIN_DET) {
        return Ok(None);
    }
    let conic = [c[(1, 1)] / det, -c[(0, 1)] / det, c[(0, 0)] / det];
    let view = sliced.mean3 - center;
    let dir = view.normalize();
    let color = sh::eval_color(cloud.layout, cloud.sh_of(i), &dir, t, cloud.period);
    let splat = Splat2D {
        gaussian: i,
        depth: proj.p_cam.z,
        mean2: proj.mean2,
        cov2: proj.cov2,
        conic,
        temporal_weight: tw,
        opacity,
        q_max: 2.0 * (peak / MIN_WEIGHT).ln(),
    };
    Ok(Some((
        splat,
        Aux {
            sliced,
            proj,
            color,
            view,
        },
    )))
}

/// Slices, projects, sorts and bins the cloud for one view and time.
pub fn prepare(cloud: &Gaussian4DCloud, camera: &Camera, t: f64) -> Result<Frame> {
    camera.validate()?;
    if !cloud.all_finite() {
        return Err(Error::NonFiniteParameter {
            what: "gaussian cloud",
        });
    }
    let center = camera.center();
    let results = par::map_range(cloud.len(), |i| slice_and_project(cloud, camera, &center, i, t));
    let mut visible = Vec::new();
    for r in results {
        if let Some(v) = r? {
            visible.push(v);
        }
    }
    visible.sort_by(|a, b| a.0.depth.total_cmp(&b.0.depth).then(a.0.gaussian.cmp(&b.0.gaussian)));
    let (splats, aux): (Vec<_>, Vec<_>) = visible.into_iter().unzip();
    let hdr_colors = aux.iter().map(|a: &Aux| a.color.rgb).collect();

    let tiles_x = camera.width.div_ceil(TILE);
    let tiles_y = camera.height.div_ceil(TILE);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        let Some((x0, x1, y0, y1)) = pixel_bounds(s, camera.width, camera.height) else {
            continue;
        };
        for ty in y0 / TILE..=y1 / TILE {
            for tx in x0 / TILE..=x1 / TILE {
                bins[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    Ok(Frame {
        camera: camera.clone(),
        t,
        splats,
        hdr_colors,
        aux,
        tiles_x,
        tiles_y,
        bins,
    })
}

/// Inclusive pixel range whose centres fall inside the splat's cutoff ellipse.
fn pixel_bounds(s: &Splat2D, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    let rx = (s.q_max * s.cov2[(0, 0)]).sqrt();
    let ry = (s.q_max * s.cov2[(1, 1)]).sqrt();
    let x0 = (s.mean2.x - rx - PIXEL_CENTER).ceil().max(0.0);
    let x1 = (s.mean2.x + rx - PIXEL_CENTER).floor().min(width as f64 - 1.0);
    let y0 = (s.mean2.y - ry - PIXEL_CENTER).ceil().max(0.0);
    let y1 = (s.mean2.y + ry - PIXEL_CENTER).floor().min(height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
}

/// Weight of splat `s` at pixel coordinates `(px, py)` before clamping, or
/// `None` outside the cutoff ellipse.
#[inline]
fn raw_weight(s: &Splat2D, px: f64, py: f64) -> Option<(f64, f64, f64, f64)> {
    let dx = px - s.mean2.x;
    let dy = py - s.mean2.y;
    let [a, b, c] = s.conic;
    let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    if q > s.q_max {
        return None;
    }
    let g = (-0.5 * q).exp();
    Some((s.temporal_weight * s.opacity * g, g, dx, dy))
}

/// Result of compositing one pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelResult {
    pub rgb: [f64; 3],
    /// Transmittance left after the last blended splat.
    pub transmittance: f64,
    /// Number of splats blended (including zero-weight ones inside the cutoff).
    pub blended: usize,
}

/// Front-to-back compositing of `order` (indices into `splats`, already depth
/// sorted) at pixel coordinates `(px, py)`.
pub fn composite_pixel(
    splats: &[Splat2D],
    colors: &[[f64; 3]],
    order: impl IntoIterator<Item = usize>,
    px: f64,
    py: f64,
    background: [f64; 3],
    early_stop: bool,
) -> PixelResult {
    let mut t = 1.0;
    let mut rgb = [0.0; 3];
    let mut blended = 0;
    for k in order {
        let s = &splats[k];
        let Some((raw, ..)) = raw_weight(s, px, py) else { continue };
        let w = raw.min(MAX_WEIGHT);
        let c = colors[k];
        for ch in 0..3 {
            rgb[ch] += t * w * c[ch];
        }
        t *= 1.0 - w;
        blended += 1;
        if early_stop && t < MIN_TRANSMITTANCE {
            break;
        }
    }
    for ch in 0..3 {
        rgb[ch] += t * background[ch];
    }
    PixelResult {
        rgb,
        transmittance: t,
        blended,
    }
}

fn tile_pixels(frame: &Frame, tile: usize) -> impl Iterator<Item = (usize, usize)> {
    let tx = tile % frame.tiles_x;
    let ty = tile / frame.tiles_x;
    let x0 = tx * TILE;
    let y0 = ty * TILE;
    let x1 = (x0 + TILE).min(frame.width());
    let y1 = (y0 + TILE).min(frame.height());
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Composites per-splat `colors` over the frame.
pub fn composite(frame: &Frame, colors: &[[f64; 3]], opts: &RenderOptions) -> Result<ImageF> {
    if colors.len() != frame.splats.len() {
        return Err(Error::contract(format!(
            "{} colours for {} splats",
            colors.len(),
            frame.splats.len()
        )));
    }
    let tiles = par::map_range(frame.tiles_x * frame.tiles_y, |tile| {
        let bin = &frame.bins[tile];
        tile_pixels(frame, tile)
            .map(|(x, y)| {
                let px = x as f64 + PIXEL_CENTER;
                let py = y as f64 + PIXEL_CENTER;
                let r = composite_pixel(
                    &frame.splats,
                    colors,
                    bin.iter().map(|k| *k as usize),
                    px,
                    py,
                    opts.background,
                    opts.early_stop,
                );
                (x, y, r.rgb)
            })
            .collect::<Vec<_>>()
    });
    let mut img = ImageF::new(frame.width(), frame.height());
    for tile in tiles {
        for (x, y, rgb) in tile {
            img.set_pixel(x, y, rgb);
        }
    }
    Ok(img)
}

/// Gradients of the loss with respect to screen-space splat quantities.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScreenGrad {
    pub color: [f64; 3],
    pub mean2: [f64; 2],
    /// Gradient with respect to the conic entries `(a, b, c)`; `b` counts both
    /// off-diagonal positions.
    pub conic: [f64; 3],
    pub temporal_weight: f64,
    pub opacity: f64,
}

impl ScreenGrad {
    pub fn add_assign(&mut self, o: &ScreenGrad) {
        for k in 0..3 {
            self.color[k] += o.color[k];
            self.conic[k] += o.conic[k];
        }
        self.mean2[0] += o.mean2[0];
        self.mean2[1] += o.mean2[1];
        self.temporal_weight += o.temporal_weight;
        self.opacity += o.opacity;
    }
}

/// Backward of [`composite`]: one [`ScreenGrad`] per splat.
pub fn composite_backward(
    frame: &Frame,
    colors: &[[f64; 3]],
    d_image: &ImageF,
    opts: &RenderOptions,
) -> Result<Vec<ScreenGrad>> {
    if d_image.width != frame.width() || d_image.height != frame.height() {
        return Err(Error::contract(format!(
            "gradient image {}x{} does not match render {}x{}",
            d_image.width,
            d_image.height,
            frame.width(),
            frame.height()
        )));
    }
    if colors.len() != frame.splats.len() {
        return Err(Error::contract("colour count does not match splat count"));
    }
    struct Step {
        local: usize,
        w: f64,
        raw: f64,
        g: f64,
        t: f64,
        dx: f64,
        dy: f64,
    }
    let partials = par::map_range(frame.tiles_x * frame.tiles_y, |tile| {
        let bin = &frame.bins[tile];
        let mut local = vec![ScreenGrad::default(); bin.len()];
        let mut steps: Vec<Step> = Vec::new();
        for (x, y) in tile_pixels(frame, tile) {
            let dc = d_image.pixel(x, y);
            if dc == [0.0; 3] {
                continue;
            }
            let px = x as f64 + PIXEL_CENTER;
            let py = y as f64 + PIXEL_CENTER;
            steps.clear();
            let mut t = 1.0;
            for (li, &k) in bin.iter().enumerate() {
                let s = &frame.splats[k as usize];
                let Some((raw, g, dx, dy)) = raw_weight(s, px, py) else { continue };
                let w = raw.min(MAX_WEIGHT);
                steps.push(Step {
                    local: li,
                    w,
                    raw,
                    g,
                    t,
                    dx,
                    dy,
                });
                t *= 1.0 - w;
                if opts.early_stop && t < MIN_TRANSMITTANCE {
                    break;
                }
            }
            let mut behind = opts.background;
            for st in steps.iter().rev() {
                let k = bin[st.local] as usize;
                let s = &frame.splats[k];
                let c = colors[k];
                let lg = &mut local[st.local];
                let mut dw = 0.0;
                for ch in 0..3 {
                    lg.color[ch] += st.t * st.w * dc[ch];
                    dw += st.t * (c[ch] - behind[ch]) * dc[ch];
                    behind[ch] = st.w * c[ch] + (1.0 - st.w) * behind[ch];
                }
                if st.raw >= MAX_WEIGHT {
                    continue;
                }
                lg.temporal_weight += dw * s.opacity * st.g;
                lg.opacity += dw * s.temporal_weight * st.g;
                let dq = -0.5 * dw * st.raw;
                let [a, b, cc] = s.conic;
                lg.mean2[0] += -2.0 * dq * (a * st.dx + b * st.dy);
                lg.mean2[1] += -2.0 * dq * (b * st.dx + cc * st.dy);
                lg.conic[0] += dq * st.dx * st.dx;
                lg.conic[1] += dq * st.dx * st.dy;
                lg.conic[2] += dq * st.dy * st.dy;
            }
        }
        local
    });
    let mut out = vec![ScreenGrad::default(); frame.splats.len()];
    for (tile, local) in partials.into_iter().enumerate() {
        for (li, g) in local.iter().enumerate() {
            out[frame.bins[tile][li] as usize].add_assign(g);
        }
    }
    Ok(out)
}

/// Pushes screen-space gradients and HDR colour gradients back to the raw
/// cloud parameters.
pub fn prepared_backward(
    cloud: &Gaussian4DCloud,
    frame: &Frame,
    screen: &[ScreenGrad],
    d_hdr_colors: &[[f64; 3]],
) -> Result<CloudGrad> {
    if screen.len() != frame.splats.len() || d_hdr_colors.len() != frame.splats.len() {
        return Err(Error::contract("gradient count does not match splat count"));
    }
    let per = cloud.layout.coeffs_per_gaussian();
    let grads = par::map_range(frame.splats.len(), |k| {
        let s = &frame.splats[k];
        let aux = &frame.aux[k];
        let sg = &screen[k];
        let i = s.gaussian;
        let d_raw_opacity = sg.opacity * s.opacity * (1.0 - s.opacity);
        // conic = cov2⁻¹, so dL/dcov2 = -A dA A
        let da = Matrix2::new(sg.conic[0], sg.conic[1], sg.conic[1], sg.conic[2]);
        let a = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
        let d_cov2 = -(a * da * a);
        let d_mean2 = Vector2::new(sg.mean2[0], sg.mean2[1]);
        let (mut d_mean3, d_cov3) =
            project_backward(&frame.camera, &aux.proj, &aux.sliced.cov3, &d_mean2, &d_cov2);
        let mut d_coeffs = vec![0.0; per];
        let norm = aux.view.norm();
        let dir = aux.view / norm;
        let d_dir = sh::eval_color_backward(
            cloud.layout,
            cloud.sh_of(i),
            &aux.color,
            d_hdr_colors[k],
            &dir,
            &mut d_coeffs,
        );
        d_mean3 += (d_dir - dir * dir.dot(&d_dir)) / norm;
        let geo = slice_backward(&aux.sliced, sg.temporal_weight, &d_mean3, &d_cov3);
        (i, geo, d_raw_opacity, d_coeffs)
    });
    let mut out = CloudGrad::zeros_like(cloud);
    for (i, geo, d_op, d_coeffs) in grads {
        for k in 0..4 {
            out.mean4[i][k] += geo.mean4[k];
            out.log_scale4[i][k] += geo.log_scale4[k];
            out.quat_left[i][k] += geo.quat_left[k];
            out.quat_right[i][k] += geo.quat_right[k];
        }
        out.raw_opacity[i] += d_op;
        out.sh[i * per..(i + 1) * per]
            .iter_mut()
            .zip(&d_coeffs)
            .for_each(|(a, b)| *a += b);
    }
    Ok(out)
}

/// Tone-mapper inputs needed for [`RenderMode::Ldr3d`].
#[derive(Clone, Copy)]
pub struct ToneInput<'a> {
    pub state: &'a ToneMapperState,
    pub time_index: usize,
    pub exposure: f64,
}

struct ToneCache {
    graph: ToneGraph,
    input: Var,
    output: Var,
}

/// Everything [`render_backward`] needs from the forward pass.
pub struct RenderCache {
    pub frame: Frame,
    pub colors: Vec<[f64; 3]>,
    pub mode: RenderMode,
    pub options: RenderOptions,
    tone: Option<ToneCache>,
}

fn colors_tensor(colors: &[[f64; 3]]) -> Tensor {
    Tensor::from_vec(colors.len(), 3, colors.as_flattened().to_vec())
}

fn tensor_rows(t: &Tensor) -> Vec<[f64; 3]> {
    t.data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Renders one image and keeps what the backward pass needs.
pub fn render_forward(
    cloud: &Gaussian4DCloud,
    tone: Option<ToneInput<'_>>,
    camera: &Camera,
    t: f64,
    mode: RenderMode,
    opts: &RenderOptions,
) -> Result<(ImageF, RenderCache)> {
    let frame = prepare(cloud, camera, t)?;
    let (colors, tone_cache) = match mode {
        RenderMode::Hdr => (frame.hdr_colors.clone(), None),
        RenderMode::Ldr3d => {
            let tone = tone.ok_or_else(|| Error::contract("LDR rendering needs tone-mapper state"))?;
            let mut graph = ToneGraph::for_index(tone.state, tone.time_index)?;
            let input = graph.leaf(colors_tensor(&frame.hdr_colors));
            let output = graph.tone_map(input, tone.exposure)?;
            let colors = tensor_rows(graph.tape.value(output));
            (
                colors,
                Some(ToneCache {
                    graph,
                    input,
                    output,
                }),
            )
        }
    };
    let image = composite(&frame, &colors, opts)?;
    Ok((
        image,
        RenderCache {
            frame,
            colors,
            mode,
            options: opts.clone(),
            tone: tone_cache,
        },
    ))
}

/// Renders an HDR image, or an LDR image whose per-gaussian colours were
/// tone-mapped before compositing.
pub fn render(
    cloud: &Gaussian4DCloud,
    tone: Option<ToneInput<'_>>,
    camera: &Camera,
    t: f64,
    mode: RenderMode,
    opts: &RenderOptions,
) -> Result<ImageF> {
    Ok(render_forward(cloud, tone, camera, t, mode, opts)?.0)
}

/// Gradients of cloud (and, for LDR renders, tone-mapper) parameters.
pub fn render_backward(
    cache: &RenderCache,
    cloud: &Gaussian4DCloud,
    d_image: &ImageF,
) -> Result<(CloudGrad, Option<ToneGrad>)> {
    let screen = composite_backward(&cache.frame, &cache.colors, d_image, &cache.options)?;
    let d_colors: Vec<[f64; 3]> = screen.iter().map(|g| g.color).collect();
    match &cache.tone {
        None => Ok((prepared_backward(cloud, &cache.frame, &screen, &d_colors)?, None)),
        Some(tc) => {
            let grads = tc.graph.tape.backward(&[(tc.output, colors_tensor(&d_colors))]);
            let d_hdr = grads.get_or_zeros(tc.input, tc.graph.tape.value(tc.input));
            let cloud_grad = prepared_backward(cloud, &cache.frame, &screen, &tensor_rows(&d_hdr))?;
            Ok((cloud_grad, Some(tc.graph.param_grads(&grads))))
        }
    }
}
