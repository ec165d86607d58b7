//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, u64 LE header length, UTF-8 JSON header, then the
//! arrays listed in the header as little-endian f32 in declared order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamHyper, Model, Moments, Optimizer, ParamGroup, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::scene::{sh::ShLayout, Gaussian4DCloud};
use crate::tonemap::{CellKind, DrclWeights, RadianceBank, ToneCurves, ToneMapperState, CURVE_HIDDEN};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"H4DGSCK1";
const FORMAT_VERSION: u32 = 1;
const CHANNELS: [&str; 3] = ["r", "g", "b"];
const CURVE_TENSORS: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Structure {
    gaussians: usize,
    sh_degree: usize,
    fourier_order: usize,
    period: f64,
    cell_kind: CellKind,
    context_dim: usize,
    curve_hidden: usize,
    window: usize,
    bank_times: Vec<f64>,
    bank_momentum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    iteration: u64,
    seed: u64,
    config_sha256: String,
    config: TrainConfig,
    structure: Structure,
    adam: AdamHyper,
    adam_step: u64,
    skipped_steps: u64,
    arrays: Vec<ArrayInfo>,
}

/// Training configuration plus complete training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

struct Arrays<'a> {
    infos: Vec<ArrayInfo>,
    data: Vec<&'a [f64]>,
}

impl<'a> Arrays<'a> {
    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &'a [f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.infos.push(ArrayInfo {
            name: name.into(),
            shape,
            dtype: "f32le".into(),
        });
        self.data.push(data);
    }
}

impl Checkpoint {
    pub fn new(config: TrainConfig, state: TrainState) -> Self {
        Self { config, state }
    }

    pub fn model(&self) -> &Model {
        &self.state.model
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = &self.state.model;
        let cloud = &model.cloud;
        let tone = &model.tone;
        let n = cloud.len();
        let per = cloud.layout.coeffs_per_gaussian();
        let flags: Vec<f64> = tone.bank.initialized.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();

        let mut arrays = Arrays {
            infos: Vec::new(),
            data: Vec::new(),
        };
        arrays.push("cloud.mean4", vec![n, 4], cloud.mean4.as_flattened());
        arrays.push("cloud.log_scale4", vec![n, 4], cloud.log_scale4.as_flattened());
        arrays.push("cloud.quat_left", vec![n, 4], cloud.quat_left.as_flattened());
        arrays.push("cloud.quat_right", vec![n, 4], cloud.quat_right.as_flattened());
        arrays.push("cloud.raw_opacity", vec![n], &cloud.raw_opacity);
        arrays.push("cloud.sh", vec![n, per], &cloud.sh);
        for (c, ch) in tone.curves.channels.iter().enumerate() {
            for (j, t) in ch.tensors().into_iter().enumerate() {
                arrays.push(format!("tone.curves.{}.{}", CHANNELS[c], CURVE_TENSORS[j]), vec![t.rows, t.cols], &t.data);
            }
        }
        for (j, t) in tone.drcl.tensors.iter().enumerate() {
            arrays.push(format!("tone.drcl.{j}"), vec![t.rows, t.cols], &t.data);
        }
        arrays.push("tone.bank.entries", vec![tone.bank.len(), 3], tone.bank.entries.as_flattened());
        arrays.push("tone.bank.initialized", vec![tone.bank.len()], &flags);
        for (k, g) in ParamGroup::ALL.into_iter().enumerate() {
            let mo = &self.state.optimizer.moments[k];
            arrays.push(format!("adam.{}.m", g.name()), vec![mo.m.len()], &mo.m);
            arrays.push(format!("adam.{}.v", g.name()), vec![mo.v.len()], &mo.v);
        }

        let header = Header {
            version: FORMAT_VERSION,
            iteration: self.state.iteration,
            seed: self.config.seed,
            config_sha256: self.config.hash(),
            config: self.config.clone(),
            structure: Structure {
                gaussians: n,
                sh_degree: cloud.layout.degree,
                fourier_order: cloud.layout.fourier_order,
                period: cloud.period,
                cell_kind: tone.drcl.kind,
                context_dim: tone.drcl.hidden,
                curve_hidden: tone.curves.channels[0].w2.rows,
                window: tone.window,
                bank_times: tone.bank.times.clone(),
                bank_momentum: tone.bank.momentum,
            },
            adam: self.state.optimizer.hyper,
            adam_step: self.state.optimizer.step,
            skipped_steps: self.state.skipped,
            arrays: arrays.infos,
        };
        let json = serde_json::to_vec(&header)?;
        let total: usize = arrays.data.iter().map(|d| d.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * total);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for d in arrays.data {
            for &v in d {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        if header.config.hash() != header.config_sha256 {
            return Err(bad("config hash does not match the stored config".into()));
        }
        let mut offset = 16 + hlen;
        let mut arrays: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        for info in &header.arrays {
            if info.dtype != "f32le" {
                return Err(bad(format!("array {} has unsupported dtype {}", info.name, info.dtype)));
            }
            let len: usize = info.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * len)
                .ok_or_else(|| bad(format!("array {} is truncated", info.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            arrays.push((info.name.clone(), info.shape.clone(), data));
            offset += 4 * len;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after the last array".into()));
        }
        let mut take = {
            let mut it = arrays.into_iter();
            move |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
                match it.next() {
                    Some((n, s, d)) if n == name && s == shape => Ok(d),
                    Some((n, s, _)) => Err(Error::Checkpoint(format!(
                        "expected array {name} {shape:?}, found {n} {s:?}"
                    ))),
                    None => Err(Error::Checkpoint(format!("missing array {name}"))),
                }
            }
        };

        let st = &header.structure;
        let n = st.gaussians;
        let layout = ShLayout::new(st.sh_degree, st.fourier_order);
        let per = layout.coeffs_per_gaussian();
        let quad = |v: Vec<f64>| -> Vec<[f64; 4]> { v.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect() };
        let cloud = Gaussian4DCloud {
            mean4: quad(take("cloud.mean4", &[n, 4])?),
            log_scale4: quad(take("cloud.log_scale4", &[n, 4])?),
            quat_left: quad(take("cloud.quat_left", &[n, 4])?),
            quat_right: quad(take("cloud.quat_right", &[n, 4])?),
            raw_opacity: take("cloud.raw_opacity", &[n])?,
            sh: take("cloud.sh", &[n, per])?,
            layout,
            period: st.period,
        };
        if st.curve_hidden != CURVE_HIDDEN {
            return Err(bad(format!("curve width {} is not supported", st.curve_hidden)));
        }
        let mut curves = ToneCurves::zeros(st.context_dim);
        for (c, ch) in curves.channels.iter_mut().enumerate() {
            for (j, t) in ch.tensors_mut().into_iter().enumerate() {
                let name = format!("tone.curves.{}.{}", CHANNELS[c], CURVE_TENSORS[j]);
                t.data = take(&name, &[t.rows, t.cols])?;
            }
        }
        let mut drcl = DrclWeights::zeros(st.cell_kind, st.context_dim);
        for (j, t) in drcl.tensors.iter_mut().enumerate() {
            t.data = take(&format!("tone.drcl.{j}"), &[t.rows, t.cols])?;
        }
        let tn = st.bank_times.len();
        let mut bank = RadianceBank::new(st.bank_times.clone(), st.bank_momentum);
        let entries = take("tone.bank.entries", &[tn, 3])?;
        bank.entries = entries.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        bank.initialized = take("tone.bank.initialized", &[tn])?.iter().map(|&v| v != 0.0).collect();
        let tone = ToneMapperState {
            bank,
            drcl,
            curves,
            window: st.window,
        };
        let model = Model { cloud, tone };
        let mut moments = Vec::new();
        for g in ParamGroup::ALL {
            let len = model.group_len(g);
            let m = take(&format!("adam.{}.m", g.name()), &[len])?;
            let v = take(&format!("adam.{}.v", g.name()), &[len])?;
            moments.push(Moments { m, v });
        }
        let state = TrainState {
            model,
            optimizer: Optimizer {
                hyper: header.adam,
                step: header.adam_step,
                moments,
            },
            iteration: header.iteration,
            skipped: header.skipped_steps,
        };
        Ok(Self {
            config: header.config,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::image::write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
