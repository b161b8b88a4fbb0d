//! Baselines and experiment protocols: score-based pruning, random masks,
//! constraint sweeps, the single-component ablation grid and sensitivity sweeps.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::archspace::{count_flops, count_params, retain_count, LayerMask, SubNet, SuperNet, SuperNetConfig};
use crate::diffcore::rng::{streams, RngStream};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::gate::GateConfig;
use crate::harness::data::{load_dataset, Dataset, DatasetSpec, Splits};
use crate::harness::metrics::NullSink;
use crate::scoring::{ImportanceState, ScoreWeights};
use crate::trainer::{
    finetune_subnet, stage1_pretrain, stage2_distribution_learning, SearchModel, StageIo, TrainConfig, TrainState,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Dance,
    ScoreBasedPruning,
    RandomMask,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [Self::Dance, Self::ScoreBasedPruning, Self::RandomMask];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dance => "dance",
            Self::ScoreBasedPruning => "score_based_pruning",
            Self::RandomMask => "random_mask",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline {s:?}")))
    }
}

/// Coarse grid used by the ablation table.
pub fn coarse_grid() -> Vec<f64> {
    vec![0.9, 0.8, 0.7, 0.6, 0.5]
}

/// 0.10, 0.12, ..., 0.50.
pub fn fine_grid() -> Vec<f64> {
    (0..=20).map(|i| (10 + 2 * i) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub constraints: Vec<f64>,
    pub seeds: Vec<u64>,
    pub baselines: Vec<BaselineKind>,
    /// Fine-tune every extracted SubNet for the stage-3 epoch budget before evaluation.
    pub finetune: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            constraints: coarse_grid(),
            seeds: (0..5).collect(),
            baselines: BaselineKind::ALL.to_vec(),
            finetune: false,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one seed".into()));
        }
        if self.baselines.is_empty() {
            return Err(Error::Config("sweep needs at least one baseline".into()));
        }
        for &c in &self.constraints {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::Range(format!("constraint {c} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub baseline: BaselineKind,
    pub constraint: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub params: u64,
    pub flops: u64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub records: Vec<SweepRecord>,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

impl SweepResult {
    pub fn accuracies(&self, baseline: BaselineKind, constraint: f64) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.baseline == baseline && (r.constraint - constraint).abs() < 1e-12)
            .map(|r| r.accuracy)
            .collect()
    }

    pub fn aggregate(&self, baseline: BaselineKind, constraint: f64) -> (f64, f64) {
        mean_std(&self.accuracies(baseline, constraint))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.records)
    }
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Input(format!("{other:?}")),
    }
}

/// Fraction of rows whose argmax equals the label.
pub fn logits_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Input("accuracy of an empty split".into()));
    }
    if logits.rows() != labels.len() {
        return Err(Error::dims("accuracy", logits.shape(), &[labels.len()]));
    }
    let preds: Vec<usize> = (0..logits.rows()).map(|r| argmax(logits.row(r))).collect();
    predictions_accuracy(&preds, labels)
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predictions_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Input("accuracy of an empty split".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::dims("accuracy", &[preds.len()], &[labels.len()]));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Something that can be scored on a split.
pub enum Evaluated<'a> {
    SuperNet(&'a SuperNet, Option<&'a [LayerMask]>),
    SubNet(&'a SubNet),
}

pub fn evaluate_accuracy(model: Evaluated, split: &Dataset) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Input("accuracy of an empty split".into()));
    }
    let logits = match model {
        Evaluated::SuperNet(net, Some(masks)) => net.forward_masked(masks, &split.x)?.logits,
        Evaluated::SuperNet(net, None) => net.forward(&split.x)?.logits,
        Evaluated::SubNet(s) => s.forward(&split.x)?,
    };
    logits_accuracy(&logits, &split.y)
}

/// Top-k of a score vector, ties to the lowest index.
pub fn top_k_by_score(layer: usize, scores: &[f64], k: usize) -> Result<LayerMask> {
    if k < 1 || k > scores.len() {
        return Err(Error::Range(format!("retain count {k} for width {}", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    LayerMask::from_indices(layer, scores.len(), &idx)
}

/// Per layer, keeps the top-k dimensions by combined score. No gate, no noise,
/// no data conditioning.
pub fn score_based_prune(states: &[ImportanceState], weights: &ScoreWeights, constraint: f64) -> Result<Vec<LayerMask>> {
    if !(constraint > 0.0 && constraint <= 1.0) {
        return Err(Error::Range(format!("constraint {constraint} outside (0, 1]")));
    }
    states
        .iter()
        .map(|s| {
            let score = s.current_score(weights);
            top_k_by_score(s.layer, &score.values, retain_count(constraint, s.width()))
        })
        .collect()
}

/// Uniform k-subset via a Fisher–Yates prefix.
pub fn random_mask(layer: usize, width: usize, k: usize, rng: &mut RngStream) -> Result<LayerMask> {
    if k < 1 || k > width {
        return Err(Error::Range(format!("retain count {k} for width {width}")));
    }
    let mut idx: Vec<usize> = (0..width).collect();
    for i in 0..k {
        let j = i + rng.below(width - i);
        idx.swap(i, j);
    }
    LayerMask::from_indices(layer, width, &idx[..k])
}

/// Independent stream for one (seed, constraint) sweep cell.
pub fn cell_rng(seed: u64, constraint: f64) -> RngStream {
    let key = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (constraint * 1e6).round() as u64;
    RngStream::new(key, streams::BASELINE)
}

/// Masks produced by one baseline at one constraint.
pub fn baseline_masks(
    kind: BaselineKind,
    model: &SearchModel,
    deploy_batch: &Tensor,
    constraint: f64,
    rng: &mut RngStream,
) -> Result<Vec<LayerMask>> {
    match kind {
        BaselineKind::Dance => model.deploy_masks(deploy_batch, constraint),
        BaselineKind::ScoreBasedPruning => score_based_prune(&model.detached, &model.score_weights, constraint),
        BaselineKind::RandomMask => model
            .net
            .widths()
            .iter()
            .enumerate()
            .map(|(l, &w)| random_mask(l, w, retain_count(constraint, w), rng))
            .collect(),
    }
}

/// A stage-2 model for one seed with its data.
pub struct Artifact {
    pub seed: u64,
    pub model: SearchModel,
    pub splits: Splits,
}

/// Evaluates every (baseline, constraint, seed) cell on the test split.
pub fn sweep_constraints(spec: &SweepSpec, artifacts: &[Artifact], train: &TrainConfig) -> Result<SweepResult> {
    spec.validate()?;
    let mut out = SweepResult::default();
    for art in artifacts.iter().filter(|a| spec.seeds.contains(&a.seed)) {
        for &kind in &spec.baselines {
            for &c in &spec.constraints {
                let start = Instant::now();
                let mut rng = cell_rng(art.seed, c);
                let masks = baseline_masks(kind, &art.model, &art.splits.val.x, c, &mut rng)?;
                let params = count_params(&art.model.net, Some(&masks))?;
                let flops = count_flops(&art.model.net, Some(&masks))?;
                let accuracy = if spec.finetune {
                    let mut subnet = crate::archspace::extract_subnet(
                        &art.model.net,
                        &masks,
                        crate::archspace::Provenance {
                            supernet_checksum: art.model.net.checksum(),
                            constraint: c,
                            seed: art.seed,
                        },
                    )?;
                    let mut state = TrainState::new(art.seed, train.weight_decay);
                    let mut sink = NullSink;
                    finetune_subnet(&mut subnet, &art.splits, train, &mut state, &mut StageIo::new(&mut sink))?;
                    evaluate_accuracy(Evaluated::SubNet(&subnet), &art.splits.test)?
                } else {
                    evaluate_accuracy(Evaluated::SuperNet(&art.model.net, Some(&masks)), &art.splits.test)?
                };
                out.records.push(SweepRecord {
                    baseline: kind,
                    constraint: c,
                    seed: art.seed,
                    accuracy,
                    params,
                    flops,
                    wall_ms: if train.record_wall_clock {
                        start.elapsed().as_millis() as u64
                    } else {
                        0
                    },
                });
            }
        }
    }
    Ok(out)
}

/// Everything needed to run the search pipeline for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub net: SuperNetConfig,
    pub gate: GateConfig,
    pub weights: ScoreWeights,
    pub train: TrainConfig,
    pub data: DatasetSpec,
}

impl Experiment {
    pub fn splits(&self, seed: u64) -> Result<Splits> {
        load_dataset(&self.data, seed)
    }

    /// Fresh model after stage 1.
    pub fn pretrain(&self, seed: u64, splits: &Splits) -> Result<SearchModel> {
        let mut model = SearchModel::new(self.net.clone(), self.gate.clone(), self.weights.clone(), seed)?;
        let mut state = TrainState::new(seed, self.train.weight_decay);
        let mut sink = NullSink;
        stage1_pretrain(&mut model, splits, &self.train, &mut state, &mut StageIo::new(&mut sink))?;
        Ok(model)
    }

    /// Stage 2 on a copy of a pre-trained model, with optional overrides.
    pub fn search(
        &self,
        pretrained: &SearchModel,
        splits: &Splits,
        seed: u64,
        weights: &ScoreWeights,
        gate: &GateConfig,
        train: &TrainConfig,
    ) -> Result<SearchModel> {
        weights.validate()?;
        gate.validate()?;
        let mut model = pretrained.clone();
        model.score_weights = weights.clone();
        model.gate_config = gate.clone();
        let mut state = TrainState::new(seed, train.weight_decay);
        state.stage = 1;
        let mut sink = NullSink;
        stage2_distribution_learning(&mut model, splits, train, &mut state, &mut StageIo::new(&mut sink))?;
        Ok(model)
    }

    pub fn artifact(&self, seed: u64) -> Result<Artifact> {
        let splits = self.splits(seed)?;
        let pre = self.pretrain(seed, &splits)?;
        let model = self.search(&pre, &splits, seed, &self.weights, &self.gate, &self.train)?;
        Ok(Artifact { seed, model, splits })
    }
}

/// A stage-1 model for one seed, shared by every cell that uses that seed.
pub struct Pretrained {
    pub seed: u64,
    pub model: SearchModel,
    pub splits: Splits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Static,
    Dynamic,
    Feature,
    Corr,
    Default,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [Self::Static, Self::Dynamic, Self::Feature, Self::Corr, Self::Default];

    /// Keeps one component's weight and zeroes the other three.
    pub fn weights(self, base: &ScoreWeights) -> ScoreWeights {
        let mut w = base.clone();
        let keep = |on: bool, v: f64| if on { v } else { 0.0 };
        if self != Self::Default {
            w.static_w = keep(self == Self::Static, base.static_w);
            w.dynamic_w = keep(self == Self::Dynamic, base.dynamic_w);
            w.feature_w = keep(self == Self::Feature, base.feature_w);
            w.corr_w = keep(self == Self::Corr, base.corr_w);
        }
        w
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Static => "static",
            Self::Dynamic => "dynamic",
            Self::Feature => "feature",
            Self::Corr => "corr",
            Self::Default => "default",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSpec {
    pub modes: Vec<AblationMode>,
    pub constraints: Vec<f64>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            modes: AblationMode::ALL.to_vec(),
            constraints: coarse_grid(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub mode: AblationMode,
    pub constraint: f64,
    pub seed: u64,
    pub accuracy: f64,
}

/// Table-shaped ablation grid: one stage-2 run per (mode, seed), then
/// deployment accuracy on the test split at every constraint.
pub fn ablation_run(spec: &AblationSpec, exp: &Experiment, pretrained: &[Pretrained]) -> Result<Vec<AblationRecord>> {
    let mut out = Vec::new();
    for &mode in &spec.modes {
        let weights = mode.weights(&exp.weights);
        weights.validate()?;
        for p in pretrained {
            let model = exp.search(&p.model, &p.splits, p.seed, &weights, &exp.gate, &exp.train)?;
            for &c in &spec.constraints {
                let accuracy = model.deployment_accuracy(&p.splits.val.x, &p.splits.test, c)?;
                out.push(AblationRecord {
                    mode,
                    constraint: c,
                    seed: p.seed,
                    accuracy,
                });
            }
        }
    }
    Ok(out)
}

pub fn ablation_mean(records: &[AblationRecord], mode: AblationMode, constraint: f64) -> f64 {
    let xs: Vec<f64> = records
        .iter()
        .filter(|r| r.mode == mode && (r.constraint - constraint).abs() < 1e-12)
        .map(|r| r.accuracy)
        .collect();
    mean_std(&xs).0
}

pub fn write_ablation_csv(path: &Path, records: &[AblationRecord]) -> Result<()> {
    write_csv(path, records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SensitivityAxis {
    BatchSize,
    Alpha,
    LambdaCorr,
    Tau,
}

impl SensitivityAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::BatchSize => "batch_size",
            Self::Alpha => "alpha",
            Self::LambdaCorr => "lambda_corr",
            Self::Tau => "tau",
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            Self::BatchSize => vec![8.0, 16.0, 32.0, 64.0, 128.0],
            Self::Alpha => vec![0.05, 0.1, 0.3, 0.5, 1.0],
            Self::LambdaCorr => vec![0.1, 0.3, 0.5, 0.7, 1.0],
            Self::Tau => vec![0.1, 0.5, 1.0],
        }
    }
}

impl std::str::FromStr for SensitivityAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch_size" => Ok(Self::BatchSize),
            "alpha" => Ok(Self::Alpha),
            "lambda_corr" => Ok(Self::LambdaCorr),
            "tau" => Ok(Self::Tau),
            other => Err(Error::Config(format!("unknown sensitivity axis {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub value: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub params: u64,
}

/// Reruns stage 2 per grid value and records deployment accuracy and
/// retained parameters at `constraint`.
pub fn sensitivity_sweep(
    axis: SensitivityAxis,
    grid: &[f64],
    exp: &Experiment,
    pretrained: &[Pretrained],
    constraint: f64,
) -> Result<Vec<SensitivityRecord>> {
    if grid.is_empty() {
        return Err(Error::Config("sensitivity grid is empty".into()));
    }
    let mut out = Vec::new();
    for &value in grid {
        let mut weights = exp.weights.clone();
        let mut gate = exp.gate.clone();
        let mut train = exp.train.clone();
        match axis {
            SensitivityAxis::BatchSize => train.batch_size = value as usize,
            SensitivityAxis::Alpha => weights.alpha = value,
            SensitivityAxis::LambdaCorr => weights.corr_strength = value,
            SensitivityAxis::Tau => gate.tau = value,
        }
        train.validate_shape()?;
        for p in pretrained {
            let model = exp.search(&p.model, &p.splits, p.seed, &weights, &gate, &train)?;
            let masks = model.deploy_masks(&p.splits.val.x, constraint)?;
            let accuracy = evaluate_accuracy(Evaluated::SuperNet(&model.net, Some(&masks)), &p.splits.test)?;
            out.push(SensitivityRecord {
                value,
                seed: p.seed,
                accuracy,
                params: count_params(&model.net, Some(&masks))?,
            });
        }
    }
    Ok(out)
}

pub fn write_sensitivity_csv(path: &Path, records: &[SensitivityRecord]) -> Result<()> {
    write_csv(path, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        let f = fine_grid();
        assert_eq!(f.len(), 21);
        assert_eq!(f[0], 0.1);
        assert_eq!(f[20], 0.5);
        assert_eq!(coarse_grid().len(), 5);
    }

    #[test]
    fn top_k_ties_and_maximum() {
        let m = top_k_by_score(0, &[0.5; 6], 3).unwrap();
        assert_eq!(m.retained(), vec![0, 1, 2]);
        let mut s = vec![0.1; 8];
        s[5] = 0.9;
        for k in 1..=8 {
            assert!(top_k_by_score(0, &s, k).unwrap().bits()[5]);
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(predictions_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(predictions_accuracy(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(matches!(predictions_accuracy(&[], &[]), Err(Error::Input(_))));
    }

    #[test]
    fn random_mask_full_and_repeatable() {
        let mut rng = RngStream::new(1, 8);
        assert_eq!(random_mask(0, 5, 5, &mut rng).unwrap().k(), 5);
        let a = random_mask(0, 16, 5, &mut RngStream::new(3, 8)).unwrap();
        let b = random_mask(0, 16, 5, &mut RngStream::new(3, 8)).unwrap();
        assert_eq!(a, b);
        assert!(random_mask(0, 4, 0, &mut rng).is_err());
    }

    #[test]
    fn ablation_weights_keep_one_component() {
        let w = AblationMode::Feature.weights(&ScoreWeights::default());
        assert_eq!([w.static_w, w.dynamic_w, w.feature_w, w.corr_w], [0.0, 0.0, 0.25, 0.0]);
        let zero = ScoreWeights {
            static_w: 0.0,
            dynamic_w: 0.0,
            feature_w: 0.0,
            corr_w: 0.0,
            ..ScoreWeights::default()
        };
        assert!(AblationMode::Default.weights(&zero).validate().is_err());
    }
}
