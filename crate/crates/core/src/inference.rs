//! Zero-shot scoring, exit gates and the coarse-to-fine inference loop.

use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use crate::encoder::{ModelParams, ProgressiveEncoder};
use crate::error::{Error, Result};
use crate::flopsmodel::{progressive_cost, CostConfig};
use crate::numerics::{argmax, dot, l2_norm, softmax, Matrix, Scalar};
use crate::tokenizer::TokenPlan;
use crate::wavelet::{decompose, rgb_to_ycbcr, RgbImage};

/// How many classes each trace keeps per level.
pub const TRACE_TOP_K: usize = 5;

/// Class text embeddings, unit-normalized rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank<T> {
    embeddings: Matrix<T>,
    labels: Vec<String>,
    temperature: T,
}

impl<T: Scalar> EmbeddingBank<T> {
    /// Rows already unit-norm within 1e-5 are kept bit-for-bit; any other
    /// row is normalized and reported through the log.
    pub fn new(embeddings: Matrix<T>, labels: Vec<String>, temperature: T) -> Result<Self> {
        let m = embeddings.rows();
        if m < 2 {
            return Err(Error::Config(format!("bank needs at least 2 classes, got {m}")));
        }
        if labels.len() != m {
            return Err(Error::Dimension(format!("{} labels for {m} embeddings", labels.len())));
        }
        if !(temperature > T::zero()) || !temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        let mut embeddings = embeddings;
        let mut renormalized = 0;
        for i in 0..m {
            let row = embeddings.row_mut(i);
            let n = l2_norm(row);
            if !(n > T::zero()) || !n.is_finite() {
                return Err(Error::Numeric(format!("class {i} embedding has zero norm")));
            }
            if (n.as_f64() - 1.0).abs() > 1e-5 {
                renormalized += 1;
                for v in row.iter_mut() {
                    *v = *v / n;
                }
            }
        }
        if renormalized > 0 {
            warn!("normalized {renormalized} of {m} bank rows that were not unit length");
        }
        Ok(EmbeddingBank {
            embeddings,
            labels,
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Matrix<T> {
        &self.embeddings
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }
}

/// Cosine similarity of `v` against every class.
pub fn score<T: Scalar>(v: &[T], bank: &EmbeddingBank<T>) -> Result<Vec<T>> {
    if v.len() != bank.dim() {
        return Err(Error::Dimension(format!(
            "readout has {} dims, bank has {}",
            v.len(),
            bank.dim()
        )));
    }
    let n = l2_norm(v);
    if !(n > T::zero()) {
        return Err(Error::Numeric("readout has zero norm".into()));
    }
    Ok((0..bank.len())
        .map(|m| dot(v, bank.embeddings.row(m)) / n)
        .collect())
}

/// Probabilities from `temperature`-scaled similarities.
pub fn class_probabilities<T: Scalar>(sims: &[T], temperature: T) -> Result<Vec<T>> {
    let logits: Vec<T> = sims.iter().map(|&s| s * temperature).collect();
    softmax(&logits)
}

fn top_two<T: Scalar>(scores: &[T]) -> (T, T) {
    let mut first = T::neg_infinity();
    let mut second = T::neg_infinity();
    for &s in scores {
        if s > first {
            second = first;
            first = s;
        } else if s > second {
            second = s;
        }
    }
    (first, second)
}

/// Top-1 minus top-2.
pub fn margin<T: Scalar>(scores: &[T]) -> T {
    let (a, b) = top_two(scores);
    a - b
}

/// Fires when the top-1/top-2 gap reaches `threshold`.
pub fn margin_exit<T: Scalar>(scores: &[T], threshold: f64) -> bool {
    scores.len() >= 2 && margin(scores).as_f64() >= threshold
}

/// Fires when the largest probability strictly exceeds `threshold`.
pub fn prob_exit<T: Scalar>(probs: &[T], threshold: f64) -> bool {
    probs
        .iter()
        .fold(T::neg_infinity(), |m, &p| m.max(p))
        .as_f64()
        > threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    Margin,
    Prob,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "factor")]
pub enum ThresholdMode {
    Absolute,
    /// Threshold becomes `factor * number_of_classes`. Experimental: with
    /// many classes the result is far beyond any reachable margin.
    PerClass(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSpace {
    Similarity,
    Probability,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GateConfig {
    pub kind: GateKind,
    pub threshold: f64,
    pub threshold_mode: ThresholdMode,
    /// Space the margin gate compares in. The probability gate always uses
    /// probabilities.
    pub score_space: ScoreSpace,
}

impl GateConfig {
    pub fn margin(threshold: f64) -> Self {
        GateConfig {
            kind: GateKind::Margin,
            threshold,
            threshold_mode: ThresholdMode::Absolute,
            score_space: ScoreSpace::Probability,
        }
    }

    pub fn prob(threshold: f64) -> Self {
        GateConfig {
            kind: GateKind::Prob,
            threshold,
            threshold_mode: ThresholdMode::Absolute,
            score_space: ScoreSpace::Probability,
        }
    }

    pub fn with_threshold(self, threshold: f64) -> Self {
        GateConfig { threshold, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.threshold.is_nan() || self.threshold < 0.0 {
            return Err(Error::Config(format!("threshold must be >= 0, got {}", self.threshold)));
        }
        if let ThresholdMode::PerClass(p) = self.threshold_mode {
            if p.is_nan() || p < 0.0 {
                return Err(Error::Config(format!("per-class factor must be >= 0, got {p}")));
            }
        }
        Ok(())
    }

    pub fn effective_threshold(&self, classes: usize) -> f64 {
        match self.threshold_mode {
            ThresholdMode::Absolute => self.threshold,
            ThresholdMode::PerClass(p) => p * classes as f64,
        }
    }
}

/// Scores of one readout, ready for gating.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelScores {
    pub similarities: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl LevelScores {
    pub fn compute<T: Scalar>(readout: &[T], bank: &EmbeddingBank<T>) -> Result<Self> {
        let sims = score(readout, bank)?;
        let probs = class_probabilities(&sims, bank.temperature())?;
        Ok(LevelScores {
            similarities: sims.iter().map(|s| s.as_f64()).collect(),
            probabilities: probs.iter().map(|p| p.as_f64()).collect(),
        })
    }

    /// Argmax of the similarities; lowest index on ties.
    pub fn predicted(&self) -> usize {
        argmax(&self.similarities).expect("bank has classes")
    }

    pub fn margin_in(&self, space: ScoreSpace) -> f64 {
        match space {
            ScoreSpace::Similarity => margin(&self.similarities),
            ScoreSpace::Probability => margin(&self.probabilities),
        }
    }

    pub fn max_probability(&self) -> f64 {
        self.probabilities.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn passes(&self, gate: &GateConfig) -> bool {
        let theta = gate.effective_threshold(self.similarities.len());
        match gate.kind {
            GateKind::Margin => match gate.score_space {
                ScoreSpace::Similarity => margin_exit(&self.similarities, theta),
                ScoreSpace::Probability => margin_exit(&self.probabilities, theta),
            },
            GateKind::Prob => prob_exit(&self.probabilities, theta),
        }
    }
}

/// First level whose scores pass the gate; the last level otherwise.
pub fn exit_level(levels: &[LevelScores], gate: &GateConfig) -> usize {
    levels
        .iter()
        .position(|l| l.passes(gate))
        .unwrap_or(levels.len() - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScore {
    pub class: usize,
    pub label: String,
    pub similarity: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelRecord {
    pub level: usize,
    pub tokens: usize,
    pub top: Vec<ClassScore>,
    pub margin: f64,
    pub max_probability: f64,
    pub gate_passed: bool,
    pub exited: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceTrace {
    pub levels: Vec<LevelRecord>,
    pub exit_level: usize,
    pub predicted_class: usize,
    pub predicted_label: String,
    pub tokens_processed: usize,
    pub macs_cached: u64,
    pub macs_naive: u64,
    pub gate: GateConfig,
    pub effective_threshold: f64,
}

fn level_record<T: Scalar>(
    level: usize,
    tokens: usize,
    scores: &LevelScores,
    bank: &EmbeddingBank<T>,
    gate: &GateConfig,
    exited: bool,
) -> LevelRecord {
    let mut order: Vec<usize> = (0..scores.similarities.len()).collect();
    // stable sort keeps the lowest index first among equal scores
    order.sort_by(|&a, &b| scores.similarities[b].total_cmp(&scores.similarities[a]));
    let top = order
        .iter()
        .take(TRACE_TOP_K)
        .map(|&c| ClassScore {
            class: c,
            label: bank.labels()[c].clone(),
            similarity: scores.similarities[c],
            probability: scores.probabilities[c],
        })
        .collect();
    LevelRecord {
        level,
        tokens,
        top,
        margin: scores.margin_in(gate.score_space),
        max_probability: scores.max_probability(),
        gate_passed: scores.passes(gate),
        exited,
    }
}

fn check_inputs<T: Scalar>(params: &ModelParams<T>, bank: &EmbeddingBank<T>, gate: &GateConfig) -> Result<()> {
    gate.validate()?;
    if params.config.out_dim != bank.dim() {
        return Err(Error::Dimension(format!(
            "model emits {} dims, bank has {}",
            params.config.out_dim,
            bank.dim()
        )));
    }
    Ok(())
}

/// Coarse-to-fine classification of one image: encode a level, score it,
/// exit if the gate fires, otherwise refine with the cached keys/values.
/// The last level always exits.
pub fn classify_progressive<T: Scalar>(
    image: &RgbImage<T>,
    params: &ModelParams<T>,
    bank: &EmbeddingBank<T>,
    gate: &GateConfig,
    plan: &TokenPlan,
) -> Result<InferenceTrace> {
    check_inputs(params, bank, gate)?;
    let pyramid = decompose(&rgb_to_ycbcr(image)?, plan.levels)?;
    let mut enc = ProgressiveEncoder::new(&pyramid, plan, params)?;
    let mut records = Vec::new();
    let last = plan.levels;
    let exit = loop {
        let s = enc.next_group();
        let scores = LevelScores::compute(enc.step()?, bank)?;
        let exits = s == last || scores.passes(gate);
        records.push((scores, exits));
        if exits {
            break s;
        }
    };
    let cumulative = plan.cumulative_counts();
    let levels = records
        .iter()
        .enumerate()
        .map(|(s, (sc, ex))| level_record(s, cumulative[s], sc, bank, gate, *ex))
        .collect();
    finish_trace(levels, &records[exit].0, exit, plan, params, bank, gate)
}

fn finish_trace<T: Scalar>(
    levels: Vec<LevelRecord>,
    scores: &LevelScores,
    exit: usize,
    plan: &TokenPlan,
    params: &ModelParams<T>,
    bank: &EmbeddingBank<T>,
    gate: &GateConfig,
) -> Result<InferenceTrace> {
    let cost = progressive_cost(&plan.cumulative_counts(), exit, &CostConfig::from_model(&params.config))?;
    let predicted = scores.predicted();
    Ok(InferenceTrace {
        levels,
        exit_level: exit,
        predicted_class: predicted,
        predicted_label: bank.labels()[predicted].clone(),
        tokens_processed: plan.cumulative_counts()[exit],
        macs_cached: cost.cached_total,
        macs_naive: cost.naive_total,
        gate: *gate,
        effective_threshold: gate.effective_threshold(bank.len()),
    })
}

/// Scores of every level for one image. A threshold sweep only needs these:
/// readouts never depend on the threshold, so the gate can be replayed.
pub fn all_level_scores<T: Scalar>(
    image: &RgbImage<T>,
    params: &ModelParams<T>,
    bank: &EmbeddingBank<T>,
    plan: &TokenPlan,
) -> Result<Vec<LevelScores>> {
    let pyramid = decompose(&rgb_to_ycbcr(image)?, plan.levels)?;
    let mut enc = ProgressiveEncoder::new(&pyramid, plan, params)?;
    let mut out = Vec::with_capacity(plan.levels + 1);
    while !enc.is_done() {
        out.push(LevelScores::compute(enc.step()?, bank)?);
    }
    Ok(out)
}

/// Trace built from precomputed level scores, identical to what
/// [`classify_progressive`] reports for the same image and gate.
pub fn replay_trace<T: Scalar>(
    levels: &[LevelScores],
    params: &ModelParams<T>,
    bank: &EmbeddingBank<T>,
    gate: &GateConfig,
    plan: &TokenPlan,
) -> Result<InferenceTrace> {
    check_inputs(params, bank, gate)?;
    let exit = exit_level(levels, gate);
    let cumulative = plan.cumulative_counts();
    let records = levels[..=exit]
        .iter()
        .enumerate()
        .map(|(s, sc)| level_record(s, cumulative[s], sc, bank, gate, s == exit))
        .collect();
    finish_trace(records, &levels[exit], exit, plan, params, bank, gate)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub theta: f64,
    pub mean_tokens: f64,
    pub mean_macs_cached: f64,
    pub mean_macs_naive: f64,
    pub agreement: f64,
}

/// Runs every threshold in `thetas` over `images`.
///
/// Agreement is measured against `labels` when given, otherwise against
/// each image's own full-token prediction. Images are encoded in parallel;
/// aggregation is sequential in image order.
pub fn sweep<T: Scalar>(
    images: &[RgbImage<T>],
    params: &ModelParams<T>,
    bank: &EmbeddingBank<T>,
    gate: &GateConfig,
    thetas: &[f64],
    plan: &TokenPlan,
    labels: Option<&[usize]>,
) -> Result<Vec<SweepRow>> {
    if images.is_empty() {
        return Err(Error::Config("sweep needs at least one image".into()));
    }
    if let Some(l) = labels {
        if l.len() != images.len() {
            return Err(Error::Dimension(format!("{} labels for {} images", l.len(), images.len())));
        }
    }
    for &t in thetas {
        gate.with_threshold(t).validate()?;
    }
    check_inputs(params, bank, gate)?;
    let per_image: Vec<Vec<LevelScores>> = images
        .par_iter()
        .map(|img| all_level_scores(img, params, bank, plan))
        .collect::<Result<_>>()?;
    let cfg = CostConfig::from_model(&params.config);
    let cumulative = plan.cumulative_counts();
    let full = progressive_cost(&cumulative, plan.levels, &cfg)?;
    let n = images.len() as f64;
    let mut rows = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let g = gate.with_threshold(theta);
        let (mut tokens, mut cached, mut naive, mut agree) = (0.0, 0.0, 0.0, 0usize);
        for (i, levels) in per_image.iter().enumerate() {
            let exit = exit_level(levels, &g);
            tokens += cumulative[exit] as f64;
            cached += full.steps[exit].cumulative_cached as f64;
            naive += full.steps[exit].cumulative_naive as f64;
            let reference = labels.map_or_else(|| levels[plan.levels].predicted(), |l| l[i]);
            if levels[exit].predicted() == reference {
                agree += 1;
            }
        }
        rows.push(SweepRow {
            theta,
            mean_tokens: tokens / n,
            mean_macs_cached: cached / n,
            mean_macs_naive: naive / n,
            agreement: agree as f64 / n,
        });
    }
    Ok(rows)
}

/// Serializes sweep rows as CSV with a header line.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}
