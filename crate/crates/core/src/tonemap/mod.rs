//! Dynamic tone mapper: radiance bank, recurrent context learner and
//! per-channel tone curves mapping HDR radiance to LDR under an exposure.
//!
//! All differentiation goes through [`tape::Tape`]. A [`ToneGraph`] records
//! the context learner once per frame and can then tone-map any number of
//! colour batches (per-gaussian colours and rendered HDR pixels) with shared
//! parameters, so one backward sweep serves both paths.

pub mod tape;

use std::collections::HashMap;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::scene::{sh, Gaussian4DCloud};
pub use tape::{Gradients, Tape, Tensor, Var};

/// Floor applied to radiance before the logarithm.
pub const LOG_EPS: f64 = 1e-6;
pub const CURVE_HIDDEN: usize = 64;

/// Canonical direction used for radiance signatures.
pub fn canonical_dir() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, 1.0)
}

/// Mean HDR colour of all gaussians at time `t`, seen along +z.
pub fn radiance_signature(cloud: &Gaussian4DCloud, t: f64) -> Result<[f64; 3]> {
    if cloud.is_empty() {
        return Err(Error::EmptyScene);
    }
    let dir = canonical_dir();
    let mut acc = [0.0; 3];
    for i in 0..cloud.len() {
        let c = sh::eval_color(cloud.layout, cloud.sh_of(i), &dir, t, cloud.period).rgb;
        for k in 0..3 {
            acc[k] += c[k];
        }
    }
    let n = cloud.len() as f64;
    Ok(acc.map(|v| v / n))
}

/// Per-timestamp radiance signatures, refreshed by exponential moving average.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceBank {
    pub entries: Vec<[f64; 3]>,
    pub initialized: Vec<bool>,
    /// Normalized time of each entry, ascending.
    pub times: Vec<f64>,
    pub momentum: f64,
}

impl RadianceBank {
    pub fn new(times: Vec<f64>, momentum: f64) -> Self {
        let n = times.len();
        Self {
            entries: vec![[0.0; 3]; n],
            initialized: vec![false; n],
            times,
            momentum,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// EMA update; the first update of an entry stores the signature as is.
    pub fn update(&mut self, index: usize, signature: [f64; 3]) -> Result<()> {
        if index >= self.entries.len() {
            return Err(Error::contract(format!(
                "bank index {index} out of range for {} entries",
                self.entries.len()
            )));
        }
        if self.initialized[index] {
            let m = self.momentum;
            let e = &mut self.entries[index];
            for k in 0..3 {
                e[k] = m * e[k] + (1.0 - m) * signature[k];
            }
        } else {
            self.entries[index] = signature;
            self.initialized[index] = true;
        }
        Ok(())
    }

    pub fn is_warm(&self) -> bool {
        self.initialized.iter().all(|b| *b)
    }

    /// Index of the entry whose time is closest to `t` (ties to the earlier one).
    pub fn nearest_index(&self, t: f64) -> usize {
        let mut best = 0;
        for (i, &ti) in self.times.iter().enumerate() {
            if (ti - t).abs() < (self.times[best] - t).abs() {
                best = i;
            }
        }
        best
    }

    /// The `k + 1` signatures ending at `index`, oldest first. Positions before
    /// the first entry repeat entry 0.
    pub fn window(&self, index: usize, k: usize) -> Result<Vec<[f64; 3]>> {
        if index >= self.entries.len() {
            return Err(Error::contract(format!("bank index {index} out of range")));
        }
        let mut out = Vec::with_capacity(k + 1);
        for back in (0..=k).rev() {
            let j = index.saturating_sub(back);
            if !self.initialized[j] {
                return Err(Error::ColdBank { index: j });
            }
            out.push(self.entries[j]);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Rnn,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Gru => "gru",
            CellKind::Rnn => "rnn",
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(CellKind::Gru),
            "rnn" => Ok(CellKind::Rnn),
            other => Err(Error::Config(format!("unknown cell kind `{other}`"))),
        }
    }
}

/// Recurrent context learner weights. GRU tensors are ordered
/// `W_z, U_z, b_z, W_r, U_r, b_r, W_h, U_h, b_h`; RNN tensors `W, U, b`.
/// `W_*` are hidden × 3, `U_*` hidden × hidden, `b_*` 1 × hidden.
#[derive(Clone, Debug, PartialEq)]
pub struct DrclWeights {
    pub kind: CellKind,
    pub hidden: usize,
    pub tensors: Vec<Tensor>,
}

impl DrclWeights {
    pub fn zeros(kind: CellKind, hidden: usize) -> Self {
        let gates = match kind {
            CellKind::Gru => 3,
            CellKind::Rnn => 1,
        };
        let mut tensors = Vec::new();
        for _ in 0..gates {
            tensors.push(Tensor::zeros(hidden, 3));
            tensors.push(Tensor::zeros(hidden, hidden));
            tensors.push(Tensor::zeros(1, hidden));
        }
        Self {
            kind,
            hidden,
            tensors,
        }
    }

    /// Xavier-uniform matrices, zero biases.
    pub fn xavier<R: Rng>(kind: CellKind, hidden: usize, rng: &mut R) -> Self {
        let mut w = Self::zeros(kind, hidden);
        for t in w.tensors.iter_mut() {
            if t.rows == 1 {
                continue;
            }
            let bound = (6.0 / (t.rows + t.cols) as f64).sqrt();
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        }
        w
    }
}

/// One per-channel curve: `(1 + d) → 64 → 64 → 1`, ReLU inside, sigmoid out.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

impl CurveMlp {
    pub fn zeros(context: usize, hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(hidden, 1 + context),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::zeros(hidden, hidden),
            b2: Tensor::zeros(1, hidden),
            w3: Tensor::zeros(1, hidden),
            b3: Tensor::zeros(1, 1),
        }
    }

    /// A curve that is non-decreasing in the log-exposure input at
    /// initialization. First-layer units have positive input slopes with
    /// kinks spread over `x ∈ [-14, 6]`; deeper weights are non-negative.
    /// The output is then rescaled so the pre-sigmoid value runs from -6 at
    /// `x = -14` to +4 at `x = 2`.
    pub fn monotone<R: Rng>(context: usize, hidden: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(context, hidden);
        let cols = 1 + context;
        for j in 0..hidden {
            let slope = rng.random_range(0.5..1.5);
            let kink = -14.0 + 20.0 * (j as f64 + 0.5) / hidden as f64;
            m.w1.data[j * cols] = slope;
            for c in 1..cols {
                m.w1.data[j * cols + c] = rng.random_range(-0.1..0.1);
            }
            m.b1.data[j] = -slope * kink;
        }
        let scale = 1.0 / hidden as f64;
        m.w2.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..2.0) * scale);
        m.b2.data.iter_mut().for_each(|v| *v = rng.random_range(-0.05..0.05));
        m.w3.data.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        let zeros_ctx = vec![0.0; context];
        let lo = m.pre_sigmoid(-14.0, &zeros_ctx);
        let hi = m.pre_sigmoid(2.0, &zeros_ctx);
        let gain = 10.0 / (hi - lo).max(1e-9);
        m.w3.data.iter_mut().for_each(|v| *v *= gain);
        m.b3.data[0] = -6.0 - gain * lo;
        m
    }

    fn pre_sigmoid(&self, x: f64, ctx: &[f64]) -> f64 {
        let cols = self.w1.cols;
        let hidden = self.w1.rows;
        let mut input = vec![x];
        input.extend_from_slice(ctx);
        let h1: Vec<f64> = (0..hidden)
            .map(|j| {
                let z: f64 = (0..cols).map(|c| self.w1.data[j * cols + c] * input[c]).sum();
                (z + self.b1.data[j]).max(0.0)
            })
            .collect();
        let h2: Vec<f64> = (0..hidden)
            .map(|j| {
                let z: f64 = (0..hidden).map(|c| self.w2.data[j * hidden + c] * h1[c]).sum();
                (z + self.b2.data[j]).max(0.0)
            })
            .collect();
        (0..hidden).map(|c| self.w3.data[c] * h2[c]).sum::<f64>() + self.b3.data[0]
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToneCurves {
    pub channels: [CurveMlp; 3],
}

impl ToneCurves {
    pub fn zeros(context: usize) -> Self {
        Self {
            channels: std::array::from_fn(|_| CurveMlp::zeros(context, CURVE_HIDDEN)),
        }
    }

    pub fn monotone<R: Rng>(context: usize, rng: &mut R) -> Self {
        Self {
            channels: std::array::from_fn(|_| CurveMlp::monotone(context, CURVE_HIDDEN, rng)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ToneGroup {
    ToneCurves,
    Drcl,
}

impl ToneGroup {
    pub fn name(self) -> &'static str {
        match self {
            ToneGroup::ToneCurves => "tone_curves",
            ToneGroup::Drcl => "drcl",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToneMapperState {
    pub bank: RadianceBank,
    pub drcl: DrclWeights,
    pub curves: ToneCurves,
    /// Window length `k`: the learner sees `k + 1` signatures.
    pub window: usize,
}

impl ToneMapperState {
    pub fn new<R: Rng>(
        times: Vec<f64>,
        momentum: f64,
        kind: CellKind,
        hidden: usize,
        window: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            bank: RadianceBank::new(times, momentum),
            drcl: DrclWeights::xavier(kind, hidden, rng),
            curves: ToneCurves::monotone(hidden, rng),
            window,
        }
    }

    /// Learnable tensors in a fixed order: curve tensors (channel-major), then
    /// learner tensors.
    pub fn params(&self) -> Vec<(ToneGroup, &Tensor)> {
        let mut out = Vec::new();
        for ch in &self.curves.channels {
            for t in ch.tensors() {
                out.push((ToneGroup::ToneCurves, t));
            }
        }
        for t in &self.drcl.tensors {
            out.push((ToneGroup::Drcl, t));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ToneGroup, &mut Tensor)> {
        let mut out = Vec::new();
        for ch in self.curves.channels.iter_mut() {
            for t in ch.tensors_mut() {
                out.push((ToneGroup::ToneCurves, t));
            }
        }
        for t in self.drcl.tensors.iter_mut() {
            out.push((ToneGroup::Drcl, t));
        }
        out
    }
}

/// Gradients for [`ToneMapperState::params`], same order and shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ToneGrad {
    pub tensors: Vec<Tensor>,
    pub groups: Vec<ToneGroup>,
}

impl ToneGrad {
    pub fn zeros_like(state: &ToneMapperState) -> Self {
        let params = state.params();
        Self {
            tensors: params.iter().map(|(_, t)| Tensor::zeros(t.rows, t.cols)).collect(),
            groups: params.iter().map(|(g, _)| *g).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ToneGrad) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
    }

    /// Flattened gradient of one group.
    pub fn group_flat(&self, group: ToneGroup) -> Vec<f64> {
        self.tensors
            .iter()
            .zip(&self.groups)
            .filter(|(_, g)| **g == group)
            .flat_map(|(t, _)| t.data.iter().copied())
            .collect()
    }
}

/// A recorded context-learner pass plus any tone-mapping batches built on it.
pub struct ToneGraph {
    pub tape: Tape,
    params: Vec<Var>,
    curve_vars: [[Var; 6]; 3],
    pub context: Var,
    groups: Vec<ToneGroup>,
}

impl ToneGraph {
    /// Records the learner over `window` (oldest first).
    pub fn new(state: &ToneMapperState, window: &[[f64; 3]]) -> Result<Self> {
        if window.len() != state.window + 1 {
            return Err(Error::contract(format!(
                "context window has {} entries, expected {}",
                window.len(),
                state.window + 1
            )));
        }
        let mut tape = Tape::new();
        let mut params = Vec::new();
        let mut groups = Vec::new();
        for (g, t) in state.params() {
            params.push(tape.leaf(t.clone()));
            groups.push(g);
        }
        let curve_vars: [[Var; 6]; 3] =
            std::array::from_fn(|c| std::array::from_fn(|j| params[c * 6 + j]));
        let drcl = &params[18..];
        let hidden = state.drcl.hidden;
        let mut h = tape.leaf(Tensor::zeros(1, hidden));
        for sig in window {
            let x = tape.leaf(Tensor::row_vector(sig));
            h = match state.drcl.kind {
                CellKind::Gru => {
                    let gate = |tape: &mut Tape, w: Var, u: Var, b: Var, h: Var| {
                        let a = tape.affine(x, w, b);
                        let r = tape.matmul_t(h, u);
                        tape.add(a, r)
                    };
                    let zp = gate(&mut tape, drcl[0], drcl[1], drcl[2], h);
                    let z = tape.sigmoid(zp);
                    let rp = gate(&mut tape, drcl[3], drcl[4], drcl[5], h);
                    let r = tape.sigmoid(rp);
                    let rh = tape.mul(r, h);
                    let cp = gate(&mut tape, drcl[6], drcl[7], drcl[8], rh);
                    let cand = tape.tanh(cp);
                    let diff = tape.sub(cand, h);
                    let step = tape.mul(z, diff);
                    tape.add(h, step)
                }
                CellKind::Rnn => {
                    let a = tape.affine(x, drcl[0], drcl[2]);
                    let r = tape.matmul_t(h, drcl[1]);
                    let s = tape.add(a, r);
                    tape.tanh(s)
                }
            };
        }
        Ok(Self {
            tape,
            params,
            curve_vars,
            context: h,
            groups,
        })
    }

    /// Builds the graph for `state` at bank entry `index`.
    pub fn for_index(state: &ToneMapperState, index: usize) -> Result<Self> {
        let window = state.bank.window(index, state.window)?;
        Self::new(state, &window)
    }

    pub fn context_value(&self) -> Vec<f64> {
        self.tape.value(self.context).data.clone()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.tape.leaf(value)
    }

    /// Tone-maps an `n × 3` HDR colour tensor already on the tape.
    pub fn tone_map(&mut self, colors: Var, exposure: f64) -> Result<Var> {
        Ok(self.tone_map_batch(colors, exposure)?.output)
    }

    fn tone_map_batch(&mut self, colors: Var, exposure: f64) -> Result<Batch> {
        if !(exposure > 0.0) || !exposure.is_finite() {
            return Err(Error::InvalidExposure(exposure));
        }
        let n = self.tape.value(colors).rows;
        let x = self.tape.log_exposure(colors, exposure, LOG_EPS);
        let ctx = self.tape.broadcast_rows(self.context, n);
        let mut pre1 = [Var(0); 3];
        let mut pre2 = [Var(0); 3];
        let mut outs = [Var(0); 3];
        for c in 0..3 {
            let [w1, b1, w2, b2, w3, b3] = self.curve_vars[c];
            let xc = self.tape.column(x, c);
            let input = self.tape.concat_cols(xc, ctx);
            pre1[c] = self.tape.affine(input, w1, b1);
            let h = self.tape.relu(pre1[c]);
            pre2[c] = self.tape.affine(h, w2, b2);
            let h = self.tape.relu(pre2[c]);
            let y = self.tape.affine(h, w3, b3);
            outs[c] = self.tape.sigmoid(y);
        }
        let output = self.tape.stack_cols(&outs);
        Ok(Batch {
            input: colors,
            pre1,
            pre2,
            outs,
            output,
        })
    }

    /// `∂ out[r, c] / ∂ in[r, c]` for every row of a batch (the curves act
    /// per channel, so this is the whole Jacobian).
    /// Rows where `only` is false are left at zero.
    fn slopes(&self, batch: &Batch, only: Option<&[bool]>) -> Tensor {
        let input = self.tape.value(batch.input);
        let rows = input.rows;
        let mut out = Tensor::zeros(rows, 3);
        for c in 0..3 {
            let [w1, _, w2, _, w3, _] = self.curve_vars[c].map(|v| self.tape.value(v));
            let a1 = self.tape.value(batch.pre1[c]);
            let a2 = self.tape.value(batch.pre2[c]);
            let y = self.tape.value(batch.outs[c]);
            let hidden = w2.rows;
            let mut v1 = vec![0.0; hidden];
            for r in 0..rows {
                let x = input.at(r, c);
                if x <= LOG_EPS || only.is_some_and(|o| !o[r]) {
                    continue;
                }
                for i in 0..hidden {
                    v1[i] = if a1.at(r, i) > 0.0 { w1.at(i, 0) } else { 0.0 };
                }
                let mut s = 0.0;
                for j in 0..hidden {
                    if a2.at(r, j) > 0.0 {
                        let row = w2.row(j);
                        let u: f64 = row.iter().zip(&v1).map(|(a, b)| a * b).sum();
                        s += w3.data[j] * u;
                    }
                }
                let yr = y.data[r];
                out.data[r * 3 + c] = yr * (1.0 - yr) * s / x;
            }
        }
        out
    }

    /// Tone-maps an image, evaluating each distinct pixel value once.
    pub fn tone_map_image(&mut self, hdr: &ImageF, exposure: f64) -> Result<ImageVars> {
        let n = hdr.width * hdr.height;
        let mut unique: Vec<f64> = Vec::new();
        let mut seen: HashMap<[u64; 3], usize> = HashMap::new();
        let mut index = Vec::with_capacity(n);
        for p in 0..n {
            let px = &hdr.data[p * 3..p * 3 + 3];
            let key = [px[0].to_bits(), px[1].to_bits(), px[2].to_bits()];
            let id = *seen.entry(key).or_insert_with(|| {
                unique.extend_from_slice(px);
                unique.len() / 3 - 1
            });
            index.push(id);
        }
        let rows = unique.len() / 3;
        let input = self.tape.leaf(Tensor::from_vec(rows, 3, unique));
        let batch = self.tone_map_batch(input, exposure)?;
        let output = self.tape.gather(batch.output, index.clone());
        Ok(ImageVars {
            batch,
            output,
            index,
            width: hdr.width,
            height: hdr.height,
        })
    }

    pub fn image(&self, vars: &ImageVars) -> ImageF {
        ImageF {
            width: vars.width,
            height: vars.height,
            data: self.tape.value(vars.output).data.clone(),
        }
    }

    /// Per-pixel gradient with respect to the HDR input image, given the
    /// gradient with respect to the tone-mapped image.
    pub fn image_input_grad(&self, vars: &ImageVars, d_ldr: &ImageF) -> ImageF {
        let slopes = self.slopes(&vars.batch, None);
        let mut out = ImageF::new(vars.width, vars.height);
        for (p, &u) in vars.index.iter().enumerate() {
            for c in 0..3 {
                out.data[p * 3 + c] = d_ldr.data[p * 3 + c] * slopes.data[u * 3 + c];
            }
        }
        out
    }

    /// Same as [`Self::image_input_grad`] when `grads` comes from a backward
    /// sweep seeded with `d_ldr` at `vars.output`. Pixels with a unique value
    /// read their gradient off the tape; only repeated values need slopes.
    pub fn image_input_grad_from(&self, vars: &ImageVars, d_ldr: &ImageF, grads: &Gradients) -> ImageF {
        let rows = self.tape.value(vars.batch.input).rows;
        let mut count = vec![0u32; rows];
        for &u in &vars.index {
            count[u] += 1;
        }
        let shared: Vec<bool> = count.iter().map(|&c| c > 1).collect();
        let slopes = self.slopes(&vars.batch, Some(&shared));
        let tape = grads.get(vars.batch.input);
        let mut out = ImageF::new(vars.width, vars.height);
        for (p, &u) in vars.index.iter().enumerate() {
            for c in 0..3 {
                out.data[p * 3 + c] = match tape {
                    Some(g) if !shared[u] => g.data[u * 3 + c],
                    Some(_) | None => d_ldr.data[p * 3 + c] * slopes.data[u * 3 + c],
                };
            }
        }
        out
    }

    /// Gradient of the tone parameters from a backward sweep of this tape.
    pub fn param_grads(&self, grads: &Gradients) -> ToneGrad {
        ToneGrad {
            tensors: self
                .params
                .iter()
                .map(|v| grads.get_or_zeros(*v, self.tape.value(*v)))
                .collect(),
            groups: self.groups.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Batch {
    input: Var,
    pre1: [Var; 3],
    pre2: [Var; 3],
    outs: [Var; 3],
    output: Var,
}

/// Tape handles of a tone-mapped image.
#[derive(Clone, Debug)]
pub struct ImageVars {
    batch: Batch,
    pub output: Var,
    index: Vec<usize>,
    pub width: usize,
    pub height: usize,
}

impl ImageVars {
    /// Number of distinct pixel values that went through the curves.
    pub fn unique_rows(&self) -> usize {
        self.index.iter().copied().max().map_or(0, |m| m + 1)
    }
}

/// Runs the context learner over a window of signatures (oldest first).
pub fn drcl_forward(state: &ToneMapperState, window: &[[f64; 3]]) -> Result<Vec<f64>> {
    Ok(ToneGraph::new(state, window)?.context_value())
}

/// Tone-maps HDR colours with a fixed context vector.
pub fn tone_map_colors(
    curves: &ToneCurves,
    colors: &[[f64; 3]],
    exposure: f64,
    context: &[f64],
) -> Result<Vec<[f64; 3]>> {
    let mut graph = ToneGraph::with_context(curves, context);
    let input = graph.leaf(Tensor::from_vec(colors.len(), 3, colors.as_flattened().to_vec()));
    let out = graph.tone_map(input, exposure)?;
    Ok(graph
        .tape
        .value(out)
        .data
        .chunks(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect())
}

/// Tone-maps every pixel of an HDR image with a fixed context vector.
pub fn tone_map_image(curves: &ToneCurves, hdr: &ImageF, exposure: f64, context: &[f64]) -> Result<ImageF> {
    let mut graph = ToneGraph::with_context(curves, context);
    let vars = graph.tone_map_image(hdr, exposure)?;
    Ok(graph.image(&vars))
}

/// Learner pass at bank entry `index` followed by tone mapping of the given
/// HDR colours. Returns the LDR colours and the context vector.
pub fn dtm_apply(
    state: &ToneMapperState,
    colors: &[[f64; 3]],
    index: usize,
    exposure: f64,
) -> Result<(Vec<[f64; 3]>, Vec<f64>)> {
    let context = ToneGraph::for_index(state, index)?.context_value();
    let ldr = tone_map_colors(&state.curves, colors, exposure, &context)?;
    Ok((ldr, context))
}

impl ToneGraph {
    /// A graph whose context is a constant instead of a learner output.
    /// Learner parameters are absent; their gradients come back as zeros.
    pub fn with_context(curves: &ToneCurves, context: &[f64]) -> Self {
        let mut tape = Tape::new();
        let mut params = Vec::new();
        let mut groups = Vec::new();
        for ch in &curves.channels {
            for t in ch.tensors() {
                params.push(tape.leaf(t.clone()));
                groups.push(ToneGroup::ToneCurves);
            }
        }
        let curve_vars: [[Var; 6]; 3] =
            std::array::from_fn(|c| std::array::from_fn(|j| params[c * 6 + j]));
        let context = tape.leaf(Tensor::row_vector(context));
        Self {
            tape,
            params,
            curve_vars,
            context,
            groups,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ShLayout;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(kind: CellKind, window: usize, seed: u64) -> ToneMapperState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let times: Vec<f64> = (0..6).map(|i| i as f64 / 5.0).collect();
        let mut s = ToneMapperState::new(times, 0.9, kind, 2, window, &mut rng);
        for i in 0..6 {
            let v = 0.2 + 0.1 * i as f64;
            s.bank.update(i, [v, 0.5 * v, 0.3]).unwrap();
        }
        s
    }

    #[test]
    fn bank_ema_golden_values() {
        let mut b = RadianceBank::new(vec![0.0, 1.0], 0.9);
        b.update(0, [1.0; 3]).unwrap();
        b.update(0, [0.0; 3]).unwrap();
        for v in b.entries[0] {
            assert!((v - 0.9).abs() < 1e-15);
        }
        b.update(1, [0.3, 0.2, 0.1]).unwrap();
        b.update(1, [0.3, 0.2, 0.1]).unwrap();
        assert_eq!(b.entries[1], [0.3, 0.2, 0.1]);
        assert!(matches!(b.update(2, [0.0; 3]), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn bank_window_pads_and_reports_cold_entries() {
        let mut b = RadianceBank::new(vec![0.0, 0.5, 1.0], 0.9);
        assert!(matches!(b.window(1, 2), Err(Error::ColdBank { index: 0 })));
        for i in 0..3 {
            b.update(i, [i as f64; 3]).unwrap();
        }
        assert_eq!(b.window(1, 2).unwrap(), vec![[0.0; 3], [0.0; 3], [1.0; 3]]);
        assert_eq!(b.window(2, 0).unwrap(), vec![[2.0; 3]]);
        assert_eq!(b.nearest_index(0.74), 1);
        assert_eq!(b.nearest_index(0.76), 2);
        assert_eq!(b.nearest_index(-3.0), 0);
    }

    #[test]
    fn zero_learner_gives_zero_context() {
        let mut s = state(CellKind::Gru, 3, 1);
        s.drcl = DrclWeights::zeros(CellKind::Gru, 2);
        assert_eq!(drcl_forward(&s, &[[0.3, 0.1, 5.0]; 4]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(drcl_forward(&s, &[[0.0; 3]; 3]), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn scalar_gru_matches_hand_recurrence() {
        let mut s = state(CellKind::Gru, 4, 2);
        s.drcl = DrclWeights::zeros(CellKind::Gru, 1);
        // only the first input channel drives the cell
        let (wz, uz, bz, wr, ur, br, wh, uh, bh) = (0.7, -0.4, 0.1, -0.3, 0.9, 0.2, 1.1, 0.6, -0.05);
        let vals = [wz, uz, bz, wr, ur, br, wh, uh, bh];
        for (t, v) in s.drcl.tensors.iter_mut().zip(vals) {
            t.data[0] = v;
        }
        s.curves = ToneCurves::zeros(1);
        let x = 0.8;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = 0.0f64;
        for _ in 0..5 {
            let z = sig(wz * x + uz * h + bz);
            let r = sig(wr * x + ur * h + br);
            let c = (wh * x + uh * (r * h) + bh).tanh();
            h = (1.0 - z) * h + z * c;
        }
        let f = drcl_forward(&s, &[[x, 0.0, 0.0]; 5]).unwrap();
        assert!((f[0] - h).abs() <= 1e-10 * h.abs());
    }

    #[test]
    fn constant_window_is_order_invariant() {
        let s = state(CellKind::Gru, 5, 3);
        let w = vec![[0.4, 0.2, 0.9]; 6];
        let mut r = w.clone();
        r.reverse();
        assert_eq!(drcl_forward(&s, &w).unwrap(), drcl_forward(&s, &r).unwrap());
    }

    #[test]
    fn zero_curves_give_half() {
        let curves = ToneCurves::zeros(2);
        let out = tone_map_colors(&curves, &[[0.0; 3], [5.0, 1e-9, 300.0]], 0.125, &[0.3, -0.2]).unwrap();
        assert!(out.iter().flatten().all(|v| *v == 0.5));
        assert!(matches!(
            tone_map_colors(&curves, &[[1.0; 3]], 0.0, &[0.0, 0.0]),
            Err(Error::InvalidExposure(_))
        ));
    }

    #[test]
    fn exposure_product_is_exact() {
        let s = state(CellKind::Gru, 2, 4);
        let ctx = [0.2, -0.4];
        let colors = [[0.3, 2.5, 0.01], [40.0, 0.7, 1e-3]];
        let half: Vec<[f64; 3]> = colors.iter().map(|c| c.map(|v| v / 2.0)).collect();
        let a = tone_map_colors(&s.curves, &colors, 2.0, &ctx).unwrap();
        let b = tone_map_colors(&s.curves, &half, 4.0, &ctx).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn image_path_matches_colour_path() {
        let s = state(CellKind::Rnn, 2, 5);
        let ctx = [0.1, 0.3];
        let data: Vec<f64> = (0..4 * 3 * 3).map(|k| (k % 7) as f64 * 0.3).collect();
        let img = ImageF::from_data(4, 3, data.clone()).unwrap();
        let mapped = tone_map_image(&s.curves, &img, 2.0, &ctx).unwrap();
        let flat: Vec<[f64; 3]> = data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let cols = tone_map_colors(&s.curves, &flat, 2.0, &ctx).unwrap();
        assert_eq!(mapped.data, cols.as_flattened());
        let constant = tone_map_image(&s.curves, &ImageF::filled(3, 3, [0.7, 0.2, 4.0]), 2.0, &ctx).unwrap();
        let one = tone_map_colors(&s.curves, &[[0.7, 0.2, 4.0]], 2.0, &ctx).unwrap()[0];
        assert_eq!(constant, ImageF::filled(3, 3, one));
    }

    #[test]
    fn monotone_init_ramp_stays_open_interval() {
        let s = state(CellKind::Gru, 2, 6);
        let ramp: Vec<[f64; 3]> = (0..1024).map(|i| [10f64.powf(-6.0 + 10.0 * i as f64 / 1023.0); 3]).collect();
        let out = tone_map_colors(&s.curves, &ramp, 1.0, &[0.0, 0.0]).unwrap();
        for w in out.windows(2) {
            for c in 0..3 {
                assert!(w[1][c] >= w[0][c]);
                assert!(w[0][c] > 0.0 && w[0][c] < 1.0);
            }
        }
    }

    #[test]
    fn image_input_gradient_matches_finite_differences() {
        let s = state(CellKind::Gru, 2, 7);
        // repeated pixel values exercise the deduplicated path
        let data = vec![0.5, 1.5, 0.02, 0.5, 1.5, 0.02, 3.0, 0.0, 0.8, 0.5, 1.5, 0.02];
        let img = ImageF::from_data(2, 2, data).unwrap();
        let w = ImageF::from_data(2, 2, (0..12).map(|k| (k as f64 * 0.9).sin()).collect()).unwrap();
        let loss = |im: &ImageF| -> f64 {
            let mut g = ToneGraph::for_index(&s, 3).unwrap();
            let v = g.tone_map_image(im, 2.0).unwrap();
            g.image(&v).data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
        };
        let mut g = ToneGraph::for_index(&s, 3).unwrap();
        let v = g.tone_map_image(&img, 2.0).unwrap();
        assert_eq!(v.unique_rows(), 2);
        let d = g.image_input_grad(&v, &w);
        let grads = g.tape.backward(&[(v.output, Tensor::from_vec(4, 3, w.data.clone()))]);
        let d_from = g.image_input_grad_from(&v, &w, &grads);
        for (a, b) in d.data.iter().zip(&d_from.data) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
        }
        let h = 1e-6;
        for k in 0..12 {
            let mut p = img.clone();
            p.data[k] += h;
            let mut m = img.clone();
            m.data[k] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            if img.data[k] == 0.0 {
                assert_eq!(d.data[k], 0.0);
                continue;
            }
            assert!((fd - d.data[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{k}: {fd} vs {}", d.data[k]);
        }
    }

    #[test]
    fn curve_and_context_gradients_match_finite_differences() {
        for kind in [CellKind::Gru, CellKind::Rnn] {
            let s = state(kind, 3, 8);
            let colors = [[0.3, 2.5, 0.01], [40.0, 0.7, 1e-3], [0.05, 0.05, 9.0]];
            let wts = [0.3, -0.8, 0.5, 0.9, 0.1, -0.4, 0.6, 0.2, -0.7];
            let loss = |st: &ToneMapperState| -> f64 {
                let (out, _) = dtm_apply(st, &colors, 4, 0.5).unwrap();
                out.as_flattened().iter().zip(&wts).map(|(a, b)| a * b).sum()
            };
            let mut g = ToneGraph::for_index(&s, 4).unwrap();
            let input = g.leaf(Tensor::from_vec(3, 3, colors.as_flattened().to_vec()));
            let out = g.tone_map(input, 0.5).unwrap();
            let grads = g.tape.backward(&[(out, Tensor::from_vec(3, 3, wts.to_vec()))]);
            let tg = g.param_grads(&grads);
            let h = 1e-5;
            for p in 0..s.params().len() {
                let len = s.params()[p].1.len();
                for k in (0..len).step_by((len / 10).max(1)) {
                    let eval = |d: f64| {
                        let mut st = s.clone();
                        st.params_mut()[p].1.data[k] += d;
                        loss(&st)
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let a = tg.tensors[p].data[k];
                    let denom = fd.abs().max(a.abs()).max(1e-6);
                    assert!((fd - a).abs() / denom < 1e-4, "{kind:?} param {p}[{k}]: {fd} vs {a}");
                }
            }
        }
    }

    #[test]
    fn signature_is_mean_colour() {
        let layout = ShLayout::new(1, 1);
        let mut cloud = Gaussian4DCloud::empty(layout);
        assert!(matches!(radiance_signature(&cloud, 0.0), Err(Error::EmptyScene)));
        let id = [1.0, 0.0, 0.0, 0.0];
        let mut a = vec![0.0; layout.coeffs_per_gaussian()];
        let c0 = sh::SH_C0;
        a[0] = 0.5 / c0;
        a[1] = -0.5 / c0;
        a[2] = -0.5 / c0;
        cloud.push([0.0; 4], [1.0; 4], id, id, 0.5, &a);
        let mut b = vec![0.0; layout.coeffs_per_gaussian()];
        b[0] = -0.5 / c0;
        b[1] = 0.5 / c0;
        b[2] = -0.5 / c0;
        cloud.push([0.0; 4], [1.0; 4], id, id, 0.5, &b);
        let s = radiance_signature(&cloud, 0.3).unwrap();
        for (v, e) in s.iter().zip([0.5, 0.5, 0.0]) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn curves_depend_only_on_exposure_product(
            seed in 0u64..64,
            c in proptest::array::uniform3(1e-5f64..1e3),
            e in 1e-2f64..1e2,
            j in -8i32..8,
            ctx in proptest::array::uniform2(-1.0f64..1.0),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let curves = ToneCurves::monotone(2, &mut rng);
            let k = 2f64.powi(j);
            let a = tone_map_colors(&curves, &[c], e, &ctx).unwrap();
            let b = tone_map_colors(&curves, &[c.map(|v| v * k)], e / k, &ctx).unwrap();
            proptest::prop_assert_eq!(&a, &b);
            proptest::prop_assert!(a[0].iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }
}
