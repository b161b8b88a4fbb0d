//! Component importance: static, dynamic, feature and correlation terms, and
//! their weighted combination into a per-dimension score.
//!
//! - static: `σ(θ_c)` with learnable logits `θ_c ~ N(0, 0.01²)`.
//! - dynamic: EMA of the batch mean of `σ(fusion(F) + θ_c + λ_noise·ε)`, `ε ~ Gumbel(0, 1)`.
//! - feature: EMA of `softmax(E_B[f])` over the layer's activations.
//! - correlation: `1 − λ_corr · mean_{j≠i} |R_ij|` from buffered activations.

use std::collections::VecDeque;

use crate::archspace::FEATURE_STATS;
use crate::diffcore::rng::RngStream;
use crate::diffcore::{sigmoid, softmax, Module, Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreWeights {
    pub static_w: f64,
    pub dynamic_w: f64,
    pub feature_w: f64,
    pub corr_w: f64,
    /// Gumbel noise scale inside the dynamic gate.
    pub noise: f64,
    /// Strength of the correlation penalty.
    pub corr_strength: f64,
    /// EMA coefficient.
    pub alpha: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            static_w: 0.25,
            dynamic_w: 0.25,
            feature_w: 0.25,
            corr_w: 0.25,
            noise: 0.1,
            corr_strength: 0.5,
            alpha: 0.1,
        }
    }
}

impl ScoreWeights {
    pub fn components(&self) -> [f64; 4] {
        [self.static_w, self.dynamic_w, self.feature_w, self.corr_w]
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.static_w,
            self.dynamic_w,
            self.feature_w,
            self.corr_w,
            self.noise,
            self.corr_strength,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("score weights must be finite and non-negative".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if self.components().iter().all(|&v| v == 0.0) {
            return Err(Error::Config("all four score weights are zero".into()));
        }
        Ok(())
    }
}

/// Combined score of one layer with its unweighted components.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub layer: usize,
    pub values: Vec<f64>,
    pub static_part: Vec<f64>,
    pub dynamic_part: Vec<f64>,
    pub feature_part: Vec<f64>,
    pub corr_part: Vec<f64>,
}

impl ScoreVector {
    /// Builds the weighted sum from components.
    pub fn combine(layer: usize, parts: [Vec<f64>; 4], weights: &ScoreWeights) -> Self {
        let [s, d, f, c] = parts;
        let l = weights.components();
        let values = (0..s.len())
            .map(|i| l[0] * s[i] + l[1] * d[i] + l[2] * f[i] + l[3] * c[i])
            .collect();
        Self {
            layer,
            values,
            static_part: s,
            dynamic_part: d,
            feature_part: f,
            corr_part: c,
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Per-layer importance state.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceState {
    pub layer: usize,
    /// Static logits θ_c.
    pub theta: Parameter,
    /// Per-dimension fusion weights over the layer-feature summary (W × 4).
    pub fusion_w: Parameter,
    pub fusion_b: Parameter,
    pub dynamic: Vec<f64>,
    pub feature: Vec<f64>,
    /// L1 size of the most recent dynamic / feature EMA moves.
    pub dynamic_delta: f64,
    pub feature_delta: f64,
    pub buffer: VecDeque<Tensor>,
    pub buffer_depth: usize,
    pub step: u64,
    /// Updates skipped because of non-finite inputs.
    pub skipped: u64,
}

impl ImportanceState {
    pub fn new(layer: usize, width: usize, buffer_depth: usize, rng: &mut RngStream) -> Self {
        let theta = (0..width).map(|_| 0.01 * rng.normal()).collect();
        Self {
            layer,
            theta: Parameter::new(Tensor::vector(theta)),
            fusion_w: Parameter::zeros(&[width, FEATURE_STATS]),
            fusion_b: Parameter::zeros(&[width]),
            dynamic: vec![0.5; width],
            feature: vec![1.0 / width as f64; width],
            dynamic_delta: 0.0,
            feature_delta: 0.0,
            buffer: VecDeque::with_capacity(buffer_depth),
            buffer_depth: buffer_depth.max(1),
            step: 0,
            skipped: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.dynamic.len()
    }

    pub fn static_importance(&self) -> Vec<f64> {
        self.theta.value.data().iter().map(|&t| sigmoid(t)).collect()
    }

    /// `fusion(F)[i] = Σ_s w[i, s] · F[i, s] + b[i]`.
    pub fn fusion(&self, features: &Tensor) -> Result<Vec<f64>> {
        self.check_features(features)?;
        let w = &self.fusion_w.value;
        Ok((0..self.width())
            .map(|i| {
                let dot: f64 = features.row(i).iter().zip(w.row(i)).map(|(a, b)| a * b).sum();
                dot + self.fusion_b.value.data()[i]
            })
            .collect())
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        if features.shape() != [self.width(), FEATURE_STATS] {
            return Err(Error::dims(
                "layer features",
                features.shape(),
                &[self.width(), FEATURE_STATS],
            ));
        }
        Ok(())
    }

    /// Batch mean of the noisy dynamic gate for a given fused vector and noise draw.
    pub fn dynamic_gate_mean(&self, fused: &[f64], noise: &Tensor, noise_scale: f64) -> Vec<f64> {
        let theta = self.theta.value.data();
        let pre: Vec<f64> = fused.iter().zip(theta).map(|(f, t)| f + t).collect();
        let mut g = Tensor::zeros(noise.shape());
        for r in 0..noise.rows() {
            for ((o, &e), &p) in g.row_mut(r).iter_mut().zip(noise.row(r)).zip(&pre) {
                *o = sigmoid(p + noise_scale * e);
            }
        }
        g.column_means()
    }

    /// One EMA step of the dynamic importance from a fused feature vector.
    pub fn dynamic_importance_update(
        &mut self,
        fused: &[f64],
        batch_rows: usize,
        weights: &ScoreWeights,
        rng: &mut RngStream,
    ) -> Result<()> {
        if fused.len() != self.width() {
            return Err(Error::dims("fused features", &[fused.len()], &[self.width()]));
        }
        let noise = gumbel_noise(rng, batch_rows, self.width());
        if fused.iter().any(|v| !v.is_finite()) {
            self.skipped += 1;
            return Ok(());
        }
        let eb = self.dynamic_gate_mean(fused, &noise, weights.noise);
        let next = ema(&self.dynamic, &eb, weights.alpha);
        self.commit_dynamic(next);
        Ok(())
    }

    /// Replaces the dynamic EMA with an already computed next value.
    pub fn commit_dynamic(&mut self, next: Vec<f64>) {
        self.dynamic_delta = l1(&self.dynamic, &next);
        self.dynamic = next;
        self.step += 1;
    }

    pub fn feature_importance_update(&mut self, batch_features: &Tensor, alpha: f64) -> Result<()> {
        if batch_features.cols() != self.width() || batch_features.rows() < 1 {
            return Err(Error::dims("feature update", batch_features.shape(), &[self.width()]));
        }
        if !batch_features.is_finite() {
            self.skipped += 1;
            return Ok(());
        }
        let s = softmax(&batch_features.column_means());
        let next = ema(&self.feature, &s, alpha);
        self.feature_delta = l1(&self.feature, &next);
        self.feature = next;
        Ok(())
    }

    /// Appends a batch of (masked) activations, evicting the oldest beyond the depth.
    pub fn push_activations(&mut self, acts: &Tensor) -> Result<()> {
        if acts.cols() != self.width() {
            return Err(Error::dims("activation buffer", acts.shape(), &[self.width()]));
        }
        if self.buffer.len() == self.buffer_depth {
            self.buffer.pop_front();
        }
        self.buffer.push_back(acts.clone());
        Ok(())
    }

    fn buffered_rows(&self) -> Result<Tensor> {
        let rows: usize = self.buffer.iter().map(Tensor::rows).sum();
        if rows < 2 {
            return Err(Error::State(
                "activation buffer holds fewer than 2 rows; run a forward pass first".into(),
            ));
        }
        let mut data = Vec::with_capacity(rows * self.width());
        for b in &self.buffer {
            data.extend_from_slice(b.data());
        }
        Tensor::matrix(rows, self.width(), data)
    }

    /// Per-dimension mean absolute off-diagonal correlation.
    pub fn mean_abs_correlations(&self) -> Result<Vec<f64>> {
        Ok(mean_abs_offdiag(&correlation_matrix(&self.buffered_rows()?)))
    }

    pub fn correlation_penalty(&self, corr_strength: f64) -> Result<Vec<f64>> {
        Ok(self
            .mean_abs_correlations()?
            .iter()
            .map(|r| 1.0 - corr_strength * r)
            .collect())
    }

    /// Scalar E[|R|] over off-diagonal entries.
    pub fn mean_abs_correlation(&self) -> Result<f64> {
        let per = self.mean_abs_correlations()?;
        Ok(per.iter().sum::<f64>() / per.len() as f64)
    }

    /// Correlation penalty, or no penalty when nothing has been buffered yet.
    pub fn correlation_penalty_or_neutral(&self, corr_strength: f64) -> Vec<f64> {
        self.correlation_penalty(corr_strength)
            .unwrap_or_else(|_| vec![1.0; self.width()])
    }

    pub fn combined_score(&self, weights: &ScoreWeights) -> Result<ScoreVector> {
        let corr = self.correlation_penalty(weights.corr_strength)?;
        Ok(ScoreVector::combine(
            self.layer,
            [
                self.static_importance(),
                self.dynamic.clone(),
                self.feature.clone(),
                corr,
            ],
            weights,
        ))
    }

    /// Combined score with a neutral correlation term when the buffer is empty.
    pub fn current_score(&self, weights: &ScoreWeights) -> ScoreVector {
        ScoreVector::combine(
            self.layer,
            [
                self.static_importance(),
                self.dynamic.clone(),
                self.feature.clone(),
                self.correlation_penalty_or_neutral(weights.corr_strength),
            ],
            weights,
        )
    }

    /// Differentiable score for one batch. The dynamic term is the freshly
    /// updated EMA `(1−α)·I_prev + α·E_B[g_t]`, so gradients reach θ_c and the
    /// fusion weights; feature and correlation terms enter as constants.
    pub fn score_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        features: &Tensor,
        noise: &Tensor,
        weights: &ScoreWeights,
    ) -> Result<ScoreTape> {
        self.check_features(features)?;
        let (theta, fw, fb) = (vars[0], vars[1], vars[2]);
        let feats = tape.constant(features.clone());
        let prod = tape.mul(feats, fw)?;
        let fused = tape.sum_last(prod);
        let fused = tape.add(fused, fb)?;
        let pre = tape.add(fused, theta)?;
        let noise_v = tape.constant(noise.map(|e| e * weights.noise));
        let noisy = tape.add_row(noise_v, pre)?;
        let g = tape.sigmoid(noisy);
        let eb = tape.mean_rows(g);
        let alpha = weights.alpha;
        let scaled = tape.scale(eb, alpha);
        let prev = tape.constant(Tensor::vector(
            self.dynamic.iter().map(|d| (1.0 - alpha) * d).collect(),
        ));
        let dynamic = tape.add(scaled, prev)?;
        let stat = tape.sigmoid(theta);

        let corr = self.correlation_penalty_or_neutral(weights.corr_strength);
        let l = weights.components();
        let constant_part: Vec<f64> = self
            .feature
            .iter()
            .zip(&corr)
            .map(|(f, c)| l[2] * f + l[3] * c)
            .collect();
        let s = tape.scale(stat, l[0]);
        let d = tape.scale(dynamic, l[1]);
        let sd = tape.add(s, d)?;
        let rest = tape.constant(Tensor::vector(constant_part));
        let score = tape.add(sd, rest)?;
        Ok(ScoreTape {
            score,
            dynamic,
            static_part: stat,
            corr,
        })
    }
}

impl Module for ImportanceState {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.theta, &self.fusion_w, &self.fusion_b]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.theta, &mut self.fusion_w, &mut self.fusion_b]
    }
}

/// Tape handles produced by [`ImportanceState::score_tape`].
pub struct ScoreTape {
    pub score: Var,
    pub dynamic: Var,
    pub static_part: Var,
    pub corr: Vec<f64>,
}

/// `(1−α)·prev + α·target`.
pub fn ema(prev: &[f64], target: &[f64], alpha: f64) -> Vec<f64> {
    prev.iter()
        .zip(target)
        .map(|(p, t)| (1.0 - alpha) * p + alpha * t)
        .collect()
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// `rows × width` matrix of standard Gumbel draws.
pub fn gumbel_noise(rng: &mut RngStream, rows: usize, width: usize) -> Tensor {
    let data = (0..rows * width).map(|_| rng.gumbel()).collect();
    Tensor::matrix(rows, width, data).expect("shape")
}

/// Pearson correlation between the columns of `samples` (W × W, row-major).
/// Zero-variance columns are uncorrelated with everything, including themselves.
pub fn correlation_matrix(samples: &Tensor) -> Vec<f64> {
    let (n, w) = (samples.rows(), samples.cols());
    let means = samples.column_means();
    let mut centered = samples.clone();
    for r in 0..n {
        for (v, m) in centered.row_mut(r).iter_mut().zip(&means) {
            *v -= m;
        }
    }
    let mut ss = vec![0.0; w];
    for r in 0..n {
        for (s, v) in ss.iter_mut().zip(centered.row(r)) {
            *s += v * v;
        }
    }
    let degenerate: Vec<bool> = ss
        .iter()
        .zip(&means)
        .map(|(&s, m)| (s / n as f64).sqrt() <= 1e-12 * m.abs().max(1.0))
        .collect();
    let mut r_mat = vec![0.0; w * w];
    for i in 0..w {
        if degenerate[i] {
            continue;
        }
        for j in i..w {
            if degenerate[j] {
                continue;
            }
            let mut cov = 0.0;
            for r in 0..n {
                let row = centered.row(r);
                cov += row[i] * row[j];
            }
            let v = (cov / (ss[i] * ss[j]).sqrt()).clamp(-1.0, 1.0);
            r_mat[i * w + j] = v;
            r_mat[j * w + i] = v;
        }
    }
    r_mat
}

/// Row-wise mean of |R_ij| over j ≠ i.
pub fn mean_abs_offdiag(r_mat: &[f64]) -> Vec<f64> {
    let w = (r_mat.len() as f64).sqrt() as usize;
    if w < 2 {
        return vec![0.0; w];
    }
    (0..w)
        .map(|i| {
            (0..w)
                .filter(|&j| j != i)
                .map(|j| r_mat[i * w + j].abs())
                .sum::<f64>()
                / (w - 1) as f64
        })
        .collect()
}
