//! The data-aware select gate.
//!
//! For layer `l` and a batch `D`:
//!
//! ```text
//! e      = BatchRepr(mean(D) ⊕ std(D))
//! g_l    = MLP(Combine(e ⊕ vec(F_l)))          two-layer, ReLU in between
//! g̃_l    = softmax((g_l + ε) / τ)              ε ~ Gumbel(0, 1)
//! p_l    = softmax(g̃_l ⊙ Score_l)
//! mask   = exact-k sample from p_l              Gumbel-top-k on ln p_l
//! ```
//!
//! In deployment mode `ε = 0` and the mask is the deterministic top-k of `p_l`.

use crate::archspace::{retain_count, Dense, LayerMask, FEATURE_STATS};
use crate::diffcore::rng::RngStream;
use crate::diffcore::{softmax, Module, Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scoring::ScoreVector;

pub const EMBED_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct GateConfig {
    pub tau: f64,
    pub hidden: usize,
    pub embed_dim: usize,
    /// Hard mask forward, `p_l` backward.
    pub straight_through: bool,
    /// Adds a log-probability-weighted feedback term for the gate.
    pub score_function: bool,
    pub k_min: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            hidden: 32,
            embed_dim: EMBED_DIM,
            straight_through: true,
            score_function: false,
            k_min: 1,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.tau)));
        }
        if self.hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config("gate widths must be positive".into()));
        }
        if self.k_min != 1 {
            return Err(Error::Config("k_min is fixed at 1".into()));
        }
        Ok(())
    }
}

/// Projection of batch statistics to an embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchRepr {
    pub proj: Dense,
}

impl Module for BatchRepr {
    fn params(&self) -> Vec<&Parameter> {
        self.proj.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.proj.params_mut()
    }
}

/// Per-layer combine projection and two-layer MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGate {
    pub combine: Dense,
    pub hidden: Dense,
    pub out: Dense,
}

impl LayerGate {
    pub fn width(&self) -> usize {
        self.out.out_dim()
    }
}

impl Module for LayerGate {
    fn params(&self) -> Vec<&Parameter> {
        [&self.combine, &self.hidden, &self.out]
            .into_iter()
            .flat_map(Dense::params)
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        [&mut self.combine, &mut self.hidden, &mut self.out]
            .into_iter()
            .flat_map(Dense::params_mut)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub repr: BatchRepr,
    pub layers: Vec<LayerGate>,
}

impl GateParams {
    pub fn new(input_dim: usize, widths: &[usize], config: &GateConfig, rng: &mut RngStream) -> Self {
        let repr = BatchRepr {
            proj: Dense::init(2 * input_dim, config.embed_dim, rng),
        };
        let layers = widths
            .iter()
            .map(|&w| {
                let mut out = Dense::init(config.hidden, w, rng);
                out.weight.value.data_mut().iter_mut().for_each(|v| *v *= 0.1);
                LayerGate {
                    combine: Dense::init(config.embed_dim + FEATURE_STATS * w, config.hidden, rng),
                    hidden: Dense::init(config.hidden, config.hidden, rng),
                    out,
                }
            })
            .collect();
        Self { repr, layers }
    }
}

impl Module for GateParams {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.repr.params();
        out.extend(self.layers.iter().flat_map(LayerGate::params));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.repr.params_mut();
        out.extend(self.layers.iter_mut().flat_map(LayerGate::params_mut));
        out
    }
}

/// Embedding of the current batch distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEmbedding {
    pub values: Vec<f64>,
}

/// Per-feature batch mean followed by per-feature population std.
pub fn batch_stats(batch: &Tensor) -> Result<Tensor> {
    if batch.shape().len() != 2 || batch.rows() < 2 {
        return Err(Error::InsufficientBatch {
            got: batch.rows(),
            need: 2,
        });
    }
    let means = batch.column_means();
    let stds = batch.column_stds(&means);
    let mut v = means;
    v.extend(stds);
    Tensor::matrix(1, v.len(), v)
}

pub fn batch_repr_tape(tape: &mut Tape, vars: &[Var], stats: &Tensor) -> Result<Var> {
    let x = tape.constant(stats.clone());
    let e = tape.affine(x, vars[0], vars[1])?;
    let n = tape.value(e).len();
    tape.reshape(e, &[n])
}

pub fn batch_repr(batch: &Tensor, repr: &BatchRepr) -> Result<BatchEmbedding> {
    let stats = batch_stats(batch)?;
    let mut tape = Tape::new();
    let vars = repr.bind(&mut tape);
    let e = batch_repr_tape(&mut tape, &vars, &stats)?;
    Ok(BatchEmbedding {
        values: tape.value(e).data().to_vec(),
    })
}

/// `g_l = out(relu(hidden(combine(e ⊕ vec(F_l)))))`.
pub fn gate_logits_tape(
    tape: &mut Tape,
    vars: &[Var],
    embedding: Var,
    features: &Tensor,
    width: usize,
) -> Result<Var> {
    if features.shape() != [width, FEATURE_STATS] {
        return Err(Error::dims("gate layer features", features.shape(), &[width, FEATURE_STATS]));
    }
    let f = tape.constant(features.clone());
    let joined = tape.concat(&[embedding, f]);
    let n = tape.value(joined).len();
    let x = tape.reshape(joined, &[1, n])?;
    let c = tape.affine(x, vars[0], vars[1])?;
    let h = tape.affine(c, vars[2], vars[3])?;
    let h = tape.relu(h);
    let g = tape.affine(h, vars[4], vars[5])?;
    tape.reshape(g, &[width])
}

pub fn gate_logits(embedding: &BatchEmbedding, features: &Tensor, gate: &LayerGate) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = gate.bind(&mut tape);
    let e = tape.constant(Tensor::vector(embedding.values.clone()));
    let g = gate_logits_tape(&mut tape, &vars, e, features, gate.width())?;
    Ok(tape.value(g).data().to_vec())
}

/// `softmax((g + ε)/τ)` on the tape; `noise = None` means ε = 0.
pub fn gumbel_soft_tape(tape: &mut Tape, logits: Var, noise: Option<&[f64]>, tau: f64) -> Result<Var> {
    let z = match noise {
        Some(eps) => {
            let e = tape.constant(Tensor::vector(eps.to_vec()));
            tape.add(logits, e)?
        }
        None => logits,
    };
    let z = tape.scale(z, 1.0 / tau);
    tape.softmax(z)
}

pub fn gumbel_soft(logits: &[f64], tau: f64, rng: &mut RngStream) -> Vec<f64> {
    let z: Vec<f64> = logits.iter().map(|g| (g + rng.gumbel()) / tau).collect();
    softmax(&z)
}

/// `softmax(g̃ ⊙ score)` on the tape.
pub fn sampling_probs_tape(tape: &mut Tape, soft: Var, score: Var) -> Result<Var> {
    let w = tape.mul(soft, score)?;
    tape.softmax(w)
}

pub fn sampling_probs(soft: &[f64], score: &[f64]) -> Result<Vec<f64>> {
    if soft.len() != score.len() {
        return Err(Error::dims("sampling_probs", &[soft.len()], &[score.len()]));
    }
    let w: Vec<f64> = soft.iter().zip(score).map(|(a, b)| a * b).collect();
    Ok(softmax(&w))
}

fn check_k(p: &[f64], k: usize) -> Result<()> {
    if k < 1 || k > p.len() {
        return Err(Error::Range(format!("retain count {k} for width {}", p.len())));
    }
    let positive = p.iter().filter(|&&v| v > 0.0).count();
    if positive < k {
        return Err(Error::Infeasible { positive, k });
    }
    Ok(())
}

/// Indices of the `k` largest keys; ties go to the lowest index.
fn top_k_indices(keys: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn mask_log_prob(p: &[f64], retained: &[usize]) -> f64 {
    retained.iter().map(|&i| p[i].ln()).sum()
}

/// Samples exactly `k` dimensions without replacement by Gumbel-top-k on `ln p`.
/// Returns the mask and `Σ_{i ∈ mask} ln p_i`.
pub fn bernoulli_sample_exact_k(
    layer: usize,
    p: &[f64],
    k: usize,
    rng: &mut RngStream,
) -> Result<(LayerMask, f64)> {
    check_k(p, k)?;
    let keys: Vec<f64> = p.iter().map(|&pi| pi.ln() + rng.gumbel()).collect();
    let idx = top_k_indices(&keys, k);
    let lp = mask_log_prob(p, &idx);
    Ok((LayerMask::from_indices(layer, p.len(), &idx)?, lp))
}

/// Deterministic top-k of `p` (deployment mode).
pub fn top_k_mask(layer: usize, p: &[f64], k: usize) -> Result<(LayerMask, f64)> {
    check_k(p, k)?;
    let idx = top_k_indices(p, k);
    let lp = mask_log_prob(p, &idx);
    Ok((LayerMask::from_indices(layer, p.len(), &idx)?, lp))
}

/// Whether exploration noise is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Explore,
    Deploy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateOutput {
    pub logits: Vec<f64>,
    pub soft: Vec<f64>,
    pub probs: Vec<f64>,
    pub mask: LayerMask,
    pub log_prob: f64,
}

/// Draws a mask given already computed sampling probabilities.
pub fn draw_mask(layer: usize, probs: &[f64], k: usize, mode: SampleMode, rng: &mut RngStream) -> Result<(LayerMask, f64)> {
    match mode {
        SampleMode::Explore => bernoulli_sample_exact_k(layer, probs, k, rng),
        SampleMode::Deploy => top_k_mask(layer, probs, k),
    }
}

/// Full gate for one layer: embedding → logits → Gumbel-softmax → score
/// weighting → exact-k mask with `k = max(1, round(c·W))`.
#[allow(clippy::too_many_arguments)]
pub fn select_gate(
    batch: &Tensor,
    features: &Tensor,
    constraint: f64,
    score: &ScoreVector,
    params: &GateParams,
    layer: usize,
    config: &GateConfig,
    mode: SampleMode,
    rng: &mut RngStream,
) -> Result<GateOutput> {
    let stats = batch_stats(batch)?;
    select_gate_from_stats(&stats, features, constraint, score, params, layer, config, mode, rng)
}

/// [`select_gate`] with precomputed batch statistics.
#[allow(clippy::too_many_arguments)]
pub fn select_gate_from_stats(
    stats: &Tensor,
    features: &Tensor,
    constraint: f64,
    score: &ScoreVector,
    params: &GateParams,
    layer: usize,
    config: &GateConfig,
    mode: SampleMode,
    rng: &mut RngStream,
) -> Result<GateOutput> {
    if !(constraint > 0.0 && constraint <= 1.0) {
        return Err(Error::Range(format!("constraint {constraint} outside (0, 1]")));
    }
    let gate = params
        .layers
        .get(layer)
        .ok_or(Error::Index {
            context: "gate layer",
            index: layer,
            bound: params.layers.len(),
        })?;
    let width = gate.width();
    let mut tape = Tape::new();
    let rvars = params.repr.bind(&mut tape);
    let gvars = gate.bind(&mut tape);
    let emb = batch_repr_tape(&mut tape, &rvars, stats)?;
    let logits = gate_logits_tape(&mut tape, &gvars, emb, features, width)?;
    let noise: Option<Vec<f64>> = match mode {
        SampleMode::Explore => Some((0..width).map(|_| rng.gumbel()).collect()),
        SampleMode::Deploy => None,
    };
    let soft = gumbel_soft_tape(&mut tape, logits, noise.as_deref(), config.tau)?;
    let score_v = tape.constant(Tensor::vector(score.values.clone()));
    let probs = sampling_probs_tape(&mut tape, soft, score_v)?;
    let p = tape.value(probs).data().to_vec();
    let k = retain_count(constraint, width);
    let (mask, log_prob) = draw_mask(layer, &p, k, mode, rng)?;
    Ok(GateOutput {
        logits: tape.value(logits).data().to_vec(),
        soft: tape.value(soft).data().to_vec(),
        probs: p,
        mask,
        log_prob,
    })
}
