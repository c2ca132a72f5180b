//! Attention-head intervention studies: α-sweeps over every head,
//! behavioral curves, router / image-promotion / caption-promotion
//! classification, Δ₁/Δ₂ ranking, cross-dataset transfer at fixed α, and
//! post-intervention salience shifts.

use crate::conflictgen::{
    build_prompt, classify_prediction, filter_first_token_collisions, make_pairs, ClassSet,
    ConflictPair, EncodedPrompt, LabeledImage, Modality, PairMode, PredictionOutcome,
    TokenizerMap, Vocab,
};
use crate::model::{HeadInterventionSpec, TinyVlm};
use crate::numerics::Rng;
use crate::probelab::TraceSet;
use crate::saliencelab::{salience_profile, SalienceError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InterveneError {
    #[error("evaluation set has no items for target {0:?}")]
    EmptyEvalSet(Modality),
    #[error("head curve is incomplete: {got} points for a grid of {expected}")]
    IncompleteCurve { got: usize, expected: usize },
    #[error("model: {0}")]
    Model(#[from] crate::model::ModelError),
    #[error("data: {0}")]
    Data(#[from] crate::conflictgen::DataError),
    #[error("salience: {0}")]
    Salience(#[from] SalienceError),
    #[error("probe: {0}")]
    Probe(#[from] crate::probelab::ProbeError),
}

pub type Result<T> = std::result::Result<T, InterveneError>;

/// The α sweep grid: 21 equally spaced values from -10 to 10, so -10, 0,
/// the α = 1 baseline, and 10 are all on-grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaGrid {
    values: Vec<f32>,
}

impl AlphaGrid {
    pub fn standard() -> Self {
        AlphaGrid {
            values: (-10..=10).map(|a| a as f32).collect(),
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the no-op α = 1 entry.
    pub fn baseline_index(&self) -> usize {
        self.values
            .iter()
            .position(|&a| a == 1.0)
            .expect("grid contains the baseline")
    }
}

impl Default for AlphaGrid {
    fn default() -> Self {
        AlphaGrid::standard()
    }
}

/// Collision-filtered inconsistent evaluation prompts, one list per
/// target modality.
#[derive(Debug, Clone)]
pub struct EvalSet {
    items: [Vec<(EncodedPrompt, ConflictPair)>; 2],
}

impl EvalSet {
    /// Sample `n_per_target` inconsistent pairs per target modality from
    /// an image pool, drop first-token collisions, and encode prompts.
    pub fn build(
        images: &[LabeledImage],
        classes: &ClassSet,
        vocab: &Vocab,
        template_index: usize,
        n_per_target: usize,
        rng: &mut Rng,
    ) -> Result<EvalSet> {
        let map = TokenizerMap::single_token(vocab);
        let mut items: [Vec<(EncodedPrompt, ConflictPair)>; 2] = [Vec::new(), Vec::new()];
        for target in [Modality::Image, Modality::Caption] {
            let pairs = make_pairs(images, classes, PairMode::Inconsistent, target, rng)?;
            let mut pairs = filter_first_token_collisions(pairs, &map);
            pairs.truncate(n_per_target);
            if pairs.is_empty() {
                return Err(InterveneError::EmptyEvalSet(target));
            }
            items[target as usize] = pairs
                .into_iter()
                .map(|p| {
                    let prompt = build_prompt(&p, vocab, template_index, rng);
                    (prompt, p)
                })
                .collect();
        }
        Ok(EvalSet { items })
    }

    pub fn from_items(
        image_target: Vec<(EncodedPrompt, ConflictPair)>,
        caption_target: Vec<(EncodedPrompt, ConflictPair)>,
    ) -> EvalSet {
        EvalSet {
            items: [image_target, caption_target],
        }
    }

    pub fn items_for(&self, target: Modality) -> &[(EncodedPrompt, ConflictPair)] {
        &self.items[target as usize]
    }

    pub fn total_items(&self) -> usize {
        self.items[0].len() + self.items[1].len()
    }
}

/// Answer-category fractions across the α grid for one target modality.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CurveSeries {
    /// Fraction answering the target-modality label (accuracy).
    pub target: Vec<f64>,
    /// Fraction answering the non-target (misleading) label.
    pub non_target: Vec<f64>,
    /// Everything else (other options or out-of-option answers).
    pub other: Vec<f64>,
}

/// Behavioral sweep of one attention head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadCurve {
    pub layer: usize,
    pub head: usize,
    /// Indexed by `Modality as usize`: [image-target, caption-target].
    pub by_target: [CurveSeries; 2],
    /// Target-answer portion at α = 1 per target modality.
    pub baseline: [f64; 2],
}

impl HeadCurve {
    pub fn series(&self, target: Modality) -> &CurveSeries {
        &self.by_target[target as usize]
    }
}

fn portions(
    model: &TinyVlm,
    items: &[(EncodedPrompt, ConflictPair)],
    spec: Option<HeadInterventionSpec>,
) -> Result<(f64, f64, f64)> {
    let mut counts = (0usize, 0usize, 0usize);
    for (prompt, pair) in items {
        let specs: Vec<HeadInterventionSpec> = spec
            .map(|mut s| {
                s.position = prompt.answer_position;
                s
            })
            .into_iter()
            .collect();
        let pred = model.predict_answer(prompt, &specs)?;
        match classify_prediction(Some(pred.class_id), pair, &prompt.options) {
            PredictionOutcome::Correct => counts.0 += 1,
            PredictionOutcome::Misled => counts.1 += 1,
            _ => counts.2 += 1,
        }
    }
    let n = items.len().max(1) as f64;
    Ok((counts.0 as f64 / n, counts.1 as f64 / n, counts.2 as f64 / n))
}

/// Sweep one head over the α grid for both target modalities, tallying
/// answer portions with the single intervention applied at each prompt's
/// answer position.
pub fn sweep_head(
    model: &TinyVlm,
    eval: &EvalSet,
    layer: usize,
    head: usize,
    grid: &AlphaGrid,
) -> Result<HeadCurve> {
    let mut by_target: [CurveSeries; 2] = [CurveSeries::default(), CurveSeries::default()];
    let mut baseline = [0.0f64; 2];
    for target in [Modality::Image, Modality::Caption] {
        let items = eval.items_for(target);
        if items.is_empty() {
            return Err(InterveneError::EmptyEvalSet(target));
        }
        let series = &mut by_target[target as usize];
        for &alpha in grid.values() {
            let spec = HeadInterventionSpec {
                layer,
                head,
                alpha,
                position: 0, // set per prompt
            };
            let (t, nt, o) = portions(model, items, Some(spec))?;
            series.target.push(t);
            series.non_target.push(nt);
            series.other.push(o);
        }
        baseline[target as usize] = series.target[grid.baseline_index()];
    }
    Ok(HeadCurve {
        layer,
        head,
        by_target,
        baseline,
    })
}

/// Sweep every head in layer-major order. Work is parallel across heads;
/// output order and values are independent of the thread schedule.
pub fn sweep_all_heads(model: &TinyVlm, eval: &EvalSet, grid: &AlphaGrid) -> Result<Vec<HeadCurve>> {
    let jobs: Vec<(usize, usize)> = (0..model.cfg.n_layers)
        .flat_map(|l| (0..model.cfg.n_heads).map(move |h| (l, h)))
        .collect();
    let curves: Vec<Result<HeadCurve>> = jobs
        .par_iter()
        .map(|&(layer, head)| sweep_head(model, eval, layer, head, grid))
        .collect();
    curves.into_iter().collect()
}

/// Forward passes a full sweep will issue.
pub fn sweep_budget(model: &TinyVlm, eval: &EvalSet, grid: &AlphaGrid) -> usize {
    model.cfg.n_layers * model.cfg.n_heads * grid.len() * eval.total_items()
}

/// Functional type of a head under α-scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadType {
    /// Promotes the requested modality's answer under both targets.
    Router,
    /// Promotes image answers regardless of the requested modality.
    ImagePromotion,
    /// Promotes caption answers regardless of the requested modality.
    CaptionPromotion,
    Unclassified,
}

impl HeadType {
    pub fn name(self) -> &'static str {
        match self {
            HeadType::Router => "router",
            HeadType::ImagePromotion => "image_promotion",
            HeadType::CaptionPromotion => "caption_promotion",
            HeadType::Unclassified => "unclassified",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadClassification {
    pub layer: usize,
    pub head: usize,
    pub head_type: HeadType,
    pub epsilon: f64,
    pub complementarity_ok: bool,
}

/// Trend is increasing if no step drops by more than ε and the curve
/// gains more than 2ε end to end (a material trend, not residual noise).
fn eps_increasing(xs: &[f64], eps: f64) -> bool {
    xs.windows(2).all(|w| w[1] >= w[0] - eps)
        && xs.last().unwrap_or(&0.0) - xs.first().unwrap_or(&0.0) > 2.0 * eps
}

fn eps_decreasing(xs: &[f64], eps: f64) -> bool {
    xs.windows(2).all(|w| w[1] <= w[0] + eps)
        && xs.first().unwrap_or(&0.0) - xs.last().unwrap_or(&0.0) > 2.0 * eps
}

/// Every target-portion drop beyond ε must be answered by a non-target
/// rise of at least half the drop (and vice versa): interventions may
/// shift the preferred modality but not degrade answers wholesale.
fn complementarity_ok(curve: &HeadCurve, eps: f64) -> bool {
    for series in &curve.by_target {
        for w in series
            .target
            .windows(2)
            .zip(series.non_target.windows(2))
        {
            let (t, nt) = w;
            let t_fall = t[0] - t[1];
            let nt_fall = nt[0] - nt[1];
            if t_fall > eps && (nt[1] - nt[0]) < t_fall / 2.0 {
                return false;
            }
            if nt_fall > eps && (t[1] - t[0]) < nt_fall / 2.0 {
                return false;
            }
        }
    }
    true
}

/// Classify a head from its sweep curve using ε-monotone trend tests
/// plus the complementarity requirement.
pub fn classify_head(curve: &HeadCurve, epsilon: f64) -> HeadClassification {
    let img = &curve.series(Modality::Image).target;
    let cap = &curve.series(Modality::Caption).target;
    let comp = complementarity_ok(curve, epsilon);
    let head_type = if !comp {
        HeadType::Unclassified
    } else if eps_increasing(img, epsilon) && eps_increasing(cap, epsilon) {
        HeadType::Router
    } else if eps_increasing(img, epsilon) && eps_decreasing(cap, epsilon) {
        HeadType::ImagePromotion
    } else if eps_increasing(cap, epsilon) && eps_decreasing(img, epsilon) {
        HeadType::CaptionPromotion
    } else {
        HeadType::Unclassified
    };
    HeadClassification {
        layer: curve.layer,
        head: curve.head,
        head_type,
        epsilon,
        complementarity_ok: comp,
    }
}

/// Per-head importance scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub head_type: HeadType,
    /// Intervenability: best accuracy over the grid minus baseline, over
    /// both target modalities. Never negative (α = 1 is on the grid).
    pub delta1: f64,
    /// Trend salience: the trait-direction portion's swing across α.
    pub delta2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadRanking {
    pub scores: Vec<HeadScore>,
    /// Top-5 (layer, head) per type by trend salience Δ₂.
    pub top_by_trend: Vec<(HeadType, Vec<(usize, usize)>)>,
    /// Top-5 (layer, head) per type by intervenability Δ₁.
    pub top_by_intervenability: Vec<(HeadType, Vec<(usize, usize)>)>,
    /// Heads appearing in both top-5 lists of their type.
    pub overlap: Vec<(HeadType, Vec<(usize, usize)>)>,
}

fn range(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    max - min
}

fn delta2_for(curve: &HeadCurve, head_type: HeadType) -> f64 {
    match head_type {
        // Trait direction is the target portion under each condition.
        HeadType::Router | HeadType::Unclassified => [Modality::Image, Modality::Caption]
            .iter()
            .map(|&t| range(&curve.series(t).target))
            .fold(0.0, f64::max),
        // Trait direction is the image-answer portion: the target series
        // under an image query, the non-target series under a caption one.
        HeadType::ImagePromotion => range(&curve.series(Modality::Image).target)
            .max(range(&curve.series(Modality::Caption).non_target)),
        HeadType::CaptionPromotion => range(&curve.series(Modality::Caption).target)
            .max(range(&curve.series(Modality::Image).non_target)),
    }
}

/// Score every head and produce top-5 lists per type under both ranking
/// criteria, plus their overlap.
pub fn rank_heads(classifications: &[HeadClassification], curves: &[HeadCurve]) -> HeadRanking {
    let mut scores = Vec::with_capacity(curves.len());
    for (cls, curve) in classifications.iter().zip(curves) {
        debug_assert_eq!((cls.layer, cls.head), (curve.layer, curve.head));
        let delta1 = [Modality::Image, Modality::Caption]
            .iter()
            .map(|&t| {
                let series = curve.series(t);
                let best = series.target.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                best - curve.baseline[t as usize]
            })
            .fold(0.0, f64::max);
        scores.push(HeadScore {
            layer: cls.layer,
            head: cls.head,
            head_type: cls.head_type,
            delta1,
            delta2: delta2_for(curve, cls.head_type),
        });
    }

    let types = [
        HeadType::Router,
        HeadType::ImagePromotion,
        HeadType::CaptionPromotion,
    ];
    let top5 = |key: &dyn Fn(&HeadScore) -> f64| -> Vec<(HeadType, Vec<(usize, usize)>)> {
        types
            .iter()
            .map(|&ty| {
                let mut of_type: Vec<&HeadScore> =
                    scores.iter().filter(|s| s.head_type == ty).collect();
                of_type.sort_by(|a, b| {
                    key(b)
                        .partial_cmp(&key(a))
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.layer.cmp(&b.layer))
                        .then(a.head.cmp(&b.head))
                });
                (ty, of_type.iter().take(5).map(|s| (s.layer, s.head)).collect())
            })
            .collect()
    };
    let top_by_trend = top5(&|s: &HeadScore| s.delta2);
    let top_by_intervenability = top5(&|s: &HeadScore| s.delta1);
    let overlap = types
        .iter()
        .map(|&ty| {
            let trend: &Vec<(usize, usize)> =
                &top_by_trend.iter().find(|(t, _)| *t == ty).unwrap().1;
            let inter: &Vec<(usize, usize)> = &top_by_intervenability
                .iter()
                .find(|(t, _)| *t == ty)
                .unwrap()
                .1;
            (
                ty,
                trend.iter().filter(|h| inter.contains(h)).copied().collect(),
            )
        })
        .collect();
    HeadRanking {
        scores,
        top_by_trend,
        top_by_intervenability,
        overlap,
    }
}

/// One transfer-evaluation cell: accuracy before and after amplifying the
/// chosen head at fixed α.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferCell {
    pub dataset: String,
    pub target: Modality,
    pub original: f64,
    pub intervened: f64,
    pub delta: f64,
}

/// Evaluate a chosen head at fixed α across datasets and target
/// modalities.
pub fn transfer_eval(
    model: &TinyVlm,
    head: (usize, usize),
    alpha: f32,
    datasets: &[(String, EvalSet)],
) -> Result<Vec<TransferCell>> {
    let mut cells = Vec::new();
    for (name, eval) in datasets {
        for target in [Modality::Image, Modality::Caption] {
            let items = eval.items_for(target);
            let (original, _, _) = portions(model, items, None)?;
            let spec = HeadInterventionSpec {
                layer: head.0,
                head: head.1,
                alpha,
                position: 0,
            };
            let (intervened, _, _) = portions(model, items, Some(spec))?;
            cells.push(TransferCell {
                dataset: name.clone(),
                target,
                original,
                intervened,
                delta: intervened - original,
            });
        }
    }
    Ok(cells)
}

/// Last-layer V-gap before and after a standing intervention during
/// trace capture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapShiftCell {
    pub dataset: String,
    pub target: Modality,
    pub gap_before: f64,
    pub gap_after: f64,
    pub delta: f64,
}

/// Recompute representational salience under the intervention and report
/// the per-dataset, per-modality change in the last-layer V-gap.
#[allow(clippy::too_many_arguments)]
pub fn post_intervention_salience(
    model: &TinyVlm,
    head: (usize, usize),
    alpha: f32,
    datasets: &[(String, EvalSet)],
    n_classes: usize,
    rng: &Rng,
    n_seeds: usize,
    n_init: usize,
) -> Result<Vec<GapShiftCell>> {
    let mut cells = Vec::new();
    for (name, eval) in datasets {
        for target in [Modality::Image, Modality::Caption] {
            let items = eval.items_for(target);
            let base_traces = TraceSet::capture(model, items, None)?;
            let int_traces =
                TraceSet::capture(model, items, Some((head.0, head.1, alpha)))?;
            let base_profile = salience_profile(&base_traces, n_classes, rng, n_seeds, n_init)?;
            let int_profile = salience_profile(&int_traces, n_classes, rng, n_seeds, n_init)?;
            let gap_before = base_profile.last().expect("at least one layer").gap(target);
            let gap_after = int_profile.last().expect("at least one layer").gap(target);
            cells.push(GapShiftCell {
                dataset: name.clone(),
                target,
                gap_before,
                gap_after,
                delta: gap_after - gap_before,
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests;
