//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "DANC" | version u32 | config hash u64 | stage u8 | payload len u64 | payload | checksum u64
//! ```
//!
//! The checksum is the first 8 bytes of SHA-256 over everything before it.
//! The payload holds model shapes, every parameter with its AdamW moments,
//! importance states, RNG stream positions and the stage position.

use std::collections::VecDeque;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::archspace::{Dense, LayerMask, SuperNet, SuperNetConfig};
use crate::diffcore::rng::RngState;
use crate::diffcore::{Activation, AdamW, Module, Parameter, Tensor};
use crate::error::{Error, Result};
use crate::gate::{BatchRepr, GateConfig, GateParams, LayerGate};
use crate::scoring::{ImportanceState, ScoreWeights};
use crate::trainer::{SearchModel, Streams, TrainState};

pub const MAGIC: &[u8; 4] = b"DANC";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 1 + 8;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: u64,
    /// Last completed (or in-progress) stage.
    pub stage: u8,
    pub model: SearchModel,
    pub state: TrainState,
    /// Deployment masks, present once stage 3 has run.
    pub masks: Option<Vec<LayerMask>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u64(n as u64);
    }
    fn bool(&mut self, v: bool) {
        self.u8(u8::from(v));
    }
    fn f64s(&mut self, xs: &[f64]) {
        self.len(xs.len());
        xs.iter().for_each(|&x| self.f64(x));
    }
    fn tensor(&mut self, t: &Tensor) {
        self.len(t.shape().len());
        t.shape().iter().for_each(|&d| self.len(d));
        t.data().iter().for_each(|&x| self.f64(x));
    }
    fn param(&mut self, p: &Parameter) {
        self.tensor(&p.value);
        self.tensor(&p.m);
        self.tensor(&p.v);
        self.u64(p.step);
    }
    fn rng(&mut self, s: &RngState) {
        self.u64(s.seed);
        self.u64(s.stream);
        self.u128(s.word_pos);
    }
    fn adamw(&mut self, a: &AdamW) {
        self.f64(a.beta1);
        self.f64(a.beta2);
        self.f64(a.eps);
        self.f64(a.weight_decay);
        self.u64(a.skipped);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corruption(format!("payload ends early at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Corruption("length overflows usize".into()))
    }
    /// An element count; every element needs at least one byte, so larger counts are corrupt.
    fn count(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.bytes.len() - self.pos) as u64 {
            return Err(Error::Corruption(format!("implausible length {n} at byte {}", self.pos - 8)));
        }
        Ok(n as usize)
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Corruption(format!("bad flag byte {b}"))),
        }
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.count()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.count()?;
        let shape: Vec<usize> = (0..rank).map(|_| self.len()).collect::<Result<_>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Corruption("tensor size overflows".into()))?;
        if n.saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(Error::Corruption("tensor larger than payload".into()));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<_>>()?;
        Tensor::new(shape, data).map_err(|e| Error::Corruption(e.to_string()))
    }
    fn param(&mut self) -> Result<Parameter> {
        let value = self.tensor()?;
        let m = self.tensor()?;
        let v = self.tensor()?;
        if m.shape() != value.shape() || v.shape() != value.shape() {
            return Err(Error::Corruption("moment shape differs from parameter".into()));
        }
        let step = self.u64()?;
        let grad = Tensor::zeros(value.shape());
        Ok(Parameter {
            value,
            grad,
            m,
            v,
            step,
        })
    }
    fn dense(&mut self) -> Result<Dense> {
        Ok(Dense {
            weight: self.param()?,
            bias: self.param()?,
        })
    }
    fn rng(&mut self) -> Result<RngState> {
        Ok(RngState {
            seed: self.u64()?,
            stream: self.u64()?,
            word_pos: self.u128()?,
        })
    }
    fn adamw(&mut self) -> Result<AdamW> {
        Ok(AdamW {
            beta1: self.f64()?,
            beta2: self.f64()?,
            eps: self.f64()?,
            weight_decay: self.f64()?,
            skipped: self.u64()?,
        })
    }
}

fn activation_code(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Sigmoid => 1,
        Activation::Softmax => 2,
    }
}

fn activation_from(code: u8) -> Result<Activation> {
    match code {
        0 => Ok(Activation::Relu),
        1 => Ok(Activation::Sigmoid),
        2 => Ok(Activation::Softmax),
        c => Err(Error::Corruption(format!("unknown activation code {c}"))),
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn write_payload(w: &mut Writer, ck: &Checkpoint) {
    let m = &ck.model;
    let nc = &m.net.config;
    w.len(nc.input_dim);
    w.len(nc.num_classes);
    w.len(nc.widths.len());
    nc.widths.iter().for_each(|&x| w.len(x));
    w.u8(activation_code(nc.activation));

    let g = &m.gate_config;
    w.f64(g.tau);
    w.len(g.hidden);
    w.len(g.embed_dim);
    w.bool(g.straight_through);
    w.bool(g.score_function);
    w.len(g.k_min);

    let s = &m.score_weights;
    for v in [s.static_w, s.dynamic_w, s.feature_w, s.corr_w, s.noise, s.corr_strength, s.alpha] {
        w.f64(v);
    }

    for p in m.net.params() {
        w.param(p);
    }
    for p in m.gate.params() {
        w.param(p);
    }
    for st in m.importance.iter().chain(&m.detached) {
        write_importance(w, st);
    }

    let t = &ck.state;
    w.u8(t.stage);
    w.len(t.epoch);
    w.u64(t.global_step);
    w.f64(t.best_val);
    w.len(t.since_improvement);
    w.bool(t.stopped);
    w.len(t.collapsed_batches);
    t.streams.states().iter().for_each(|s| w.rng(s));
    t.optim.iter().for_each(|a| w.adamw(a));

    match &ck.masks {
        None => w.u8(0),
        Some(masks) => {
            w.u8(1);
            w.len(masks.len());
            for mask in masks {
                w.len(mask.width());
                for &b in mask.bits() {
                    w.bool(b);
                }
            }
        }
    }
}

fn read_payload(r: &mut Reader) -> Result<(SearchModel, TrainState, Option<Vec<LayerMask>>)> {
    let input_dim = r.len()?;
    let num_classes = r.len()?;
    let nl = r.count()?;
    let widths: Vec<usize> = (0..nl).map(|_| r.len()).collect::<Result<_>>()?;
    let activation = activation_from(r.u8()?)?;
    let config = SuperNetConfig {
        input_dim,
        num_classes,
        widths: widths.clone(),
        activation,
    };

    let gate_config = GateConfig {
        tau: r.f64()?,
        hidden: r.len()?,
        embed_dim: r.len()?,
        straight_through: r.bool()?,
        score_function: r.bool()?,
        k_min: r.len()?,
    };
    let score_weights = ScoreWeights {
        static_w: r.f64()?,
        dynamic_w: r.f64()?,
        feature_w: r.f64()?,
        corr_w: r.f64()?,
        noise: r.f64()?,
        corr_strength: r.f64()?,
        alpha: r.f64()?,
    };

    let layers: Vec<Dense> = (0..nl).map(|_| r.dense()).collect::<Result<_>>()?;
    let head = r.dense()?;
    let net = SuperNet { config, layers, head };
    let repr = BatchRepr { proj: r.dense()? };
    let gate_layers: Vec<LayerGate> = (0..nl)
        .map(|_| {
            Ok(LayerGate {
                combine: r.dense()?,
                hidden: r.dense()?,
                out: r.dense()?,
            })
        })
        .collect::<Result<_>>()?;
    let gate = GateParams {
        repr,
        layers: gate_layers,
    };

    let importance = (0..nl).map(|_| read_importance(r)).collect::<Result<Vec<_>>>()?;
    let detached = (0..nl).map(|_| read_importance(r)).collect::<Result<Vec<_>>>()?;

    let stage = r.u8()?;
    let epoch = r.len()?;
    let global_step = r.u64()?;
    let best_val = r.f64()?;
    let since_improvement = r.len()?;
    let stopped = r.bool()?;
    let collapsed_batches = r.len()?;
    let mut states = [RngState {
        seed: 0,
        stream: 0,
        word_pos: 0,
    }; 6];
    for s in &mut states {
        *s = r.rng()?;
    }
    let optim = [r.adamw()?, r.adamw()?, r.adamw()?];
    let state = TrainState {
        stage,
        epoch,
        global_step,
        best_val,
        since_improvement,
        stopped,
        collapsed_batches,
        streams: Streams::from_states(states),
        optim,
    };

    let masks = match r.u8()? {
        0 => None,
        1 => {
            let n = r.count()?;
            let mut out = Vec::with_capacity(n);
            for l in 0..n {
                let w = r.count()?;
                let bits: Vec<bool> = (0..w).map(|_| r.bool()).collect::<Result<_>>()?;
                out.push(LayerMask::new(l, bits).map_err(|e| Error::Corruption(e.to_string()))?);
            }
            Some(out)
        }
        b => return Err(Error::Corruption(format!("bad mask flag {b}"))),
    };

    let model = SearchModel {
        net,
        gate,
        importance,
        detached,
        gate_config,
        score_weights,
    };
    check_shapes(&model)?;
    Ok((model, state, masks))
}

fn write_importance(w: &mut Writer, st: &ImportanceState) {
    w.len(st.layer);
    for p in st.params() {
        w.param(p);
    }
    w.f64s(&st.dynamic);
    w.f64s(&st.feature);
    w.f64(st.dynamic_delta);
    w.f64(st.feature_delta);
    w.len(st.buffer_depth);
    w.len(st.buffer.len());
    st.buffer.iter().for_each(|t| w.tensor(t));
    w.u64(st.step);
    w.u64(st.skipped);
}

fn read_importance(r: &mut Reader) -> Result<ImportanceState> {
    let layer = r.len()?;
    let theta = r.param()?;
    let fusion_w = r.param()?;
    let fusion_b = r.param()?;
    let dynamic = r.f64s()?;
    let feature = r.f64s()?;
    let dynamic_delta = r.f64()?;
    let feature_delta = r.f64()?;
    let buffer_depth = r.len()?;
    let nb = r.count()?;
    let buffer: VecDeque<Tensor> = (0..nb).map(|_| r.tensor()).collect::<Result<_>>()?;
    Ok(ImportanceState {
        layer,
        theta,
        fusion_w,
        fusion_b,
        dynamic,
        feature,
        dynamic_delta,
        feature_delta,
        buffer,
        buffer_depth,
        step: r.u64()?,
        skipped: r.u64()?,
    })
}

/// Rejects payloads whose tensors do not fit the declared architecture.
fn check_shapes(m: &SearchModel) -> Result<()> {
    let mut fan_in = m.net.config.input_dim;
    for (l, (d, &w)) in m.net.layers.iter().zip(&m.net.config.widths).enumerate() {
        if d.weight.shape() != [fan_in, w] || d.bias.shape() != [w] {
            return Err(Error::Corruption(format!("layer {l} weights do not match width {w}")));
        }
        for st in [&m.importance[l], &m.detached[l]] {
            if st.width() != w || st.feature.len() != w || st.theta.shape() != [w] {
                return Err(Error::Corruption(format!("importance state {l} does not match width {w}")));
            }
        }
        if m.gate.layers[l].width() != w {
            return Err(Error::Corruption(format!("gate layer {l} does not match width {w}")));
        }
        fan_in = w;
    }
    if m.net.head.weight.shape() != [fan_in, m.net.config.num_classes] {
        return Err(Error::Corruption("head does not match class count".into()));
    }
    Ok(())
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut payload = Writer(Vec::new());
    write_payload(&mut payload, ck);
    let mut w = Writer(Vec::with_capacity(HEADER_LEN + payload.0.len() + 8));
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u64(ck.config_hash);
    w.u8(ck.stage);
    w.len(payload.0.len());
    w.0.extend_from_slice(&payload.0);
    let sum = checksum(&w.0);
    w.u64(sum);
    w.0
}

/// Validates the checksum before parsing anything, so a corrupt file never
/// yields partial state.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < HEADER_LEN + 8 {
        return Err(Error::Corruption(format!("file of {} bytes is truncated", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8"));
    if checksum(body) != stored {
        return Err(Error::Corruption("checksum mismatch".into()));
    }
    if &body[..4] != MAGIC {
        return Err(Error::Corruption("bad magic".into()));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Corruption(format!("unsupported version {version}")));
    }
    let config_hash = r.u64()?;
    let stage = r.u8()?;
    let len = r.u64()? as usize;
    if len != body.len() - HEADER_LEN {
        return Err(Error::Corruption("payload length mismatch".into()));
    }
    let (model, state, masks) = read_payload(&mut r)?;
    if r.pos != body.len() {
        return Err(Error::Corruption("trailing bytes after payload".into()));
    }
    Ok(Checkpoint {
        config_hash,
        stage,
        model,
        state,
        masks,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(ck))?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

/// Outcome of comparing a checkpoint's config hash with the current config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HashCheck {
    Match,
    /// Mismatch accepted because of `--force`.
    Forced,
}

pub fn check_config_hash(ck: &Checkpoint, expected: u64, force: bool) -> Result<HashCheck> {
    if ck.config_hash == expected {
        Ok(HashCheck::Match)
    } else if force {
        Ok(HashCheck::Forced)
    } else {
        Err(Error::Config(format!(
            "checkpoint config hash {:016x} differs from current {:016x}; pass --force to load anyway",
            ck.config_hash, expected
        )))
    }
}
