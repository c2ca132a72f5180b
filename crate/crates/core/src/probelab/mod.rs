//! Linear probes over cached residual activations: per-layer unimodal
//! label probes and consistency probes with the three-fold ID/OOD/SID
//! class-split evaluation.
//!
//! Probes are multinomial logistic regressions trained with Adam for a
//! fixed number of epochs; the weights kept are those with the lowest
//! validation loss. Early stopping is checkpoint selection only, never a
//! halt.

use crate::conflictgen::{ConflictPair, EncodedPrompt, Modality};
use crate::model::{CaptureFlags, HeadInterventionSpec, TinyVlm};
use crate::numerics::{adam_step, softmax_f64, AdamState, Mat, Rng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("probe needs at least {needed} rows, got {got}")]
    TooSmall { got: usize, needed: usize },
    #[error("probe data is degenerate: fewer than 2 distinct labels")]
    DegenerateData,
    #[error("class folds need at least 3 classes, got {0}")]
    FoldError(usize),
    #[error("row counts differ: {left} vs {right}")]
    ShapeMismatch { left: usize, right: usize },
    #[error("model: {0}")]
    Model(#[from] crate::model::ModelError),
    #[error("numerics: {0}")]
    Numerics(#[from] crate::numerics::NumericsError),
}

pub type Result<T> = std::result::Result<T, ProbeError>;

/// Per-row bookkeeping carried alongside activations.
#[derive(Debug, Clone, Copy)]
pub struct RowMeta {
    pub image_class: usize,
    pub caption_class: usize,
    pub target: Modality,
    pub consistent: bool,
}

impl RowMeta {
    pub fn of(pair: &ConflictPair) -> RowMeta {
        RowMeta {
            image_class: pair.image.class_id,
            caption_class: pair.caption_class,
            target: pair.target,
            consistent: pair.consistent,
        }
    }
}

/// Residual activations at the answer position for a set of examples:
/// one `n x d_model` matrix per layer (post-embedding plus each block).
#[derive(Debug, Clone)]
pub struct TraceSet {
    pub per_layer: Vec<Mat>,
    pub meta: Vec<RowMeta>,
}

impl TraceSet {
    /// Run the model over `items` (optionally under a standing
    /// intervention at each prompt's answer position) and collect
    /// answer-position residuals per layer.
    pub fn capture(
        model: &TinyVlm,
        items: &[(EncodedPrompt, ConflictPair)],
        intervention: Option<(usize, usize, f32)>,
    ) -> Result<TraceSet> {
        let rows: Vec<Result<Vec<Vec<f32>>>> = items
            .par_iter()
            .map(|(prompt, _)| {
                let specs: Vec<HeadInterventionSpec> = intervention
                    .map(|(layer, head, alpha)| HeadInterventionSpec {
                        layer,
                        head,
                        alpha,
                        position: prompt.answer_position,
                    })
                    .into_iter()
                    .collect();
                let out = model.forward(prompt, &specs, CaptureFlags::residuals_only())?;
                Ok(out.trace.expect("residuals requested").residuals)
            })
            .collect();
        let n_layers = model.cfg.n_layers + 1;
        let d = model.cfg.d_model;
        let mut per_layer = vec![Mat::zeros(items.len(), d); n_layers];
        for (i, row) in rows.into_iter().enumerate() {
            let row = row?;
            for (layer, vec) in row.into_iter().enumerate() {
                per_layer[layer].row_mut(i).copy_from_slice(&vec);
            }
        }
        Ok(TraceSet {
            per_layer,
            meta: items.iter().map(|(_, p)| RowMeta::of(p)).collect(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.meta.len()
    }

    pub fn n_layers(&self) -> usize {
        self.per_layer.len()
    }

    /// Rows whose target modality matches.
    pub fn rows_for_target(&self, target: Modality) -> Vec<usize> {
        (0..self.n_rows())
            .filter(|&i| self.meta[i].target == target)
            .collect()
    }

    pub fn gather(&self, layer: usize, rows: &[usize]) -> Mat {
        let d = self.per_layer[layer].cols();
        let mut m = Mat::zeros(rows.len(), d);
        for (out_i, &r) in rows.iter().enumerate() {
            m.row_mut(out_i)
                .copy_from_slice(self.per_layer[layer].row(r));
        }
        m
    }
}

/// One layer's activations with integer labels.
#[derive(Debug, Clone)]
pub struct ProbeDataset {
    pub activations: Mat,
    pub labels: Vec<usize>,
    pub n_label_values: usize,
}

impl ProbeDataset {
    pub fn new(activations: Mat, labels: Vec<usize>, n_label_values: usize) -> Result<Self> {
        if activations.rows() != labels.len() {
            return Err(ProbeError::ShapeMismatch {
                left: activations.rows(),
                right: labels.len(),
            });
        }
        Ok(ProbeDataset {
            activations,
            labels,
            n_label_values,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub val_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 1000,
            batch_size: 256,
            lr: 1e-3,
            val_fraction: 0.2,
        }
    }
}

impl ProbeConfig {
    /// Fewer epochs for tests and smoke runs.
    pub fn quick(epochs: usize) -> Self {
        ProbeConfig {
            epochs,
            ..Default::default()
        }
    }
}

/// Affine classifier over one layer's activations. The stored weights are
/// the ones that minimized validation loss during training.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub w: Mat,
    pub b: Mat,
    pub best_val_loss: f64,
    pub best_epoch: usize,
}

impl LinearProbe {
    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        let k = self.w.cols();
        let mut out = vec![0.0f64; k];
        for (i, &xi) in x.iter().enumerate() {
            let w_row = self.w.row(i);
            for (o, &w) in out.iter_mut().zip(w_row) {
                *o += xi as f64 * w as f64;
            }
        }
        for (o, &b) in out.iter_mut().zip(self.b.row(0)) {
            *o += b as f64;
        }
        out
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        let logits = self.logits(x);
        let mut best = 0;
        for (k, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = k;
            }
        }
        best
    }

    pub fn accuracy(&self, activations: &Mat, labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let correct = (0..activations.rows())
            .filter(|&i| self.predict(activations.row(i)) == labels[i])
            .count();
        correct as f64 / labels.len() as f64
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Seeded shuffle keyed on row content, so identical rows travel
/// together: duplicating every example leaves the train/validation
/// membership of each distinct row unchanged.
fn content_shuffled_order(data: &ProbeDataset, seed: u64) -> Vec<usize> {
    let mut keyed: Vec<(u64, usize)> = (0..data.activations.rows())
        .map(|i| {
            let mut bytes = Vec::with_capacity(data.activations.cols() * 4 + 8);
            for &v in data.activations.row(i) {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            bytes.extend_from_slice(&(data.labels[i] as u64).to_le_bytes());
            (mix64(fnv1a64(&bytes) ^ seed), i)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Train a multinomial logistic probe: 80/20 seeded split, Adam, fixed
/// epoch budget, returning the weights with the lowest validation loss.
pub fn train_probe(data: &ProbeDataset, cfg: &ProbeConfig, rng: &Rng) -> Result<LinearProbe> {
    let n = data.activations.rows();
    if n < 10 {
        return Err(ProbeError::TooSmall { got: n, needed: 10 });
    }
    let distinct: std::collections::HashSet<usize> = data.labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(ProbeError::DegenerateData);
    }
    let d = data.activations.cols();
    let k = data.n_label_values;

    let order = content_shuffled_order(data, rng.seed());
    let n_val = (((n as f64) * cfg.val_fraction) as usize).max(1);
    let n_train = n - n_val;
    let train_rows = &order[..n_train];
    let val_rows = &order[n_train..];

    // Materialize batches once; they are reused every epoch in order.
    let batches: Vec<(Mat, Vec<usize>)> = train_rows
        .chunks(cfg.batch_size.max(1))
        .map(|chunk| {
            let mut m = Mat::zeros(chunk.len(), d);
            let mut labels = Vec::with_capacity(chunk.len());
            for (out_i, &r) in chunk.iter().enumerate() {
                m.row_mut(out_i).copy_from_slice(data.activations.row(r));
                labels.push(data.labels[r]);
            }
            (m, labels)
        })
        .collect();
    let val_x = {
        let mut m = Mat::zeros(val_rows.len(), d);
        for (out_i, &r) in val_rows.iter().enumerate() {
            m.row_mut(out_i).copy_from_slice(data.activations.row(r));
        }
        m
    };
    let val_labels: Vec<usize> = val_rows.iter().map(|&r| data.labels[r]).collect();

    let mut w = Mat::zeros(d, k);
    let mut b = Mat::zeros(1, k);
    let mut w_state = AdamState::new(d * k, cfg.lr);
    let mut b_state = AdamState::new(k, cfg.lr);
    let mut best = LinearProbe {
        w: w.clone(),
        b: b.clone(),
        best_val_loss: f64::INFINITY,
        best_epoch: 0,
    };

    for epoch in 0..cfg.epochs {
        for (x, labels) in &batches {
            let mut logits = x.matmul(&w)?;
            for i in 0..logits.rows() {
                let row = logits.row_mut(i);
                for (l, &bias) in row.iter_mut().zip(b.row(0)) {
                    *l += bias;
                }
            }
            let m = logits.rows();
            let mut d_logits = Mat::zeros(m, k);
            for i in 0..m {
                let row: Vec<f64> = logits.row(i).iter().map(|&v| v as f64).collect();
                let probs = softmax_f64(&row);
                let g = d_logits.row_mut(i);
                for (j, &p) in probs.iter().enumerate() {
                    let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                    g[j] = ((p - onehot) / m as f64) as f32;
                }
            }
            let dw = x.matmul_tn(&d_logits)?;
            let mut db = Mat::zeros(1, k);
            for i in 0..m {
                for (g, &v) in db.row_mut(0).iter_mut().zip(d_logits.row(i)) {
                    *g += v;
                }
            }
            adam_step(&mut w, &dw, &mut w_state)?;
            adam_step(&mut b, &db, &mut b_state)?;
        }

        let val_loss = mean_ce(&w, &b, &val_x, &val_labels)?;
        if val_loss < best.best_val_loss {
            best = LinearProbe {
                w: w.clone(),
                b: b.clone(),
                best_val_loss: val_loss,
                best_epoch: epoch,
            };
        }
    }
    Ok(best)
}

fn mean_ce(w: &Mat, b: &Mat, x: &Mat, labels: &[usize]) -> Result<f64> {
    let mut logits = x.matmul(w)?;
    for i in 0..logits.rows() {
        let row = logits.row_mut(i);
        for (l, &bias) in row.iter_mut().zip(b.row(0)) {
            *l += bias;
        }
    }
    let mut loss = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.row(i).iter().map(|&v| v as f64).collect();
        let probs = softmax_f64(&row);
        loss -= probs[label].max(f64::MIN_POSITIVE).ln();
    }
    Ok(loss / labels.len().max(1) as f64)
}

/// Index-keyed seeded split of example rows into (fit, held-out test).
fn split_rows(rows: &[usize], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut keyed: Vec<(u64, usize)> =
        rows.iter().map(|&r| (mix64(r as u64 ^ seed), r)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    let n_test = ((rows.len() as f64) * test_fraction).round() as usize;
    let split = rows.len() - n_test;
    let fit = keyed[..split].iter().map(|&(_, r)| r).collect();
    let test = keyed[split..].iter().map(|&(_, r)| r).collect();
    (fit, test)
}

/// Which unimodal label a probe decodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeKind {
    ImageLabel,
    CaptionLabel,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::ImageLabel => "image_label",
            ProbeKind::CaptionLabel => "caption_label",
        }
    }

    fn label_of(self, meta: &RowMeta) -> usize {
        match self {
            ProbeKind::ImageLabel => meta.image_class,
            ProbeKind::CaptionLabel => meta.caption_class,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct UnimodalProbeCell {
    pub layer: usize,
    pub probe: ProbeKind,
    pub target: Modality,
    pub accuracy: f64,
    pub n_test: usize,
}

/// Train image-label and caption-label probes per layer and target
/// condition over (typically inconsistent-input) traces; accuracy is
/// measured on a held-out fifth of the rows.
pub fn unimodal_probe_suite(
    traces: &TraceSet,
    n_classes: usize,
    cfg: &ProbeConfig,
    rng: &Rng,
) -> Result<Vec<UnimodalProbeCell>> {
    let mut jobs = Vec::new();
    for target in [Modality::Image, Modality::Caption] {
        let rows = traces.rows_for_target(target);
        if rows.is_empty() {
            continue;
        }
        let (fit, test) = split_rows(&rows, 0.2, rng.seed() ^ 0x756e69);
        for layer in 0..traces.n_layers() {
            for probe in [ProbeKind::ImageLabel, ProbeKind::CaptionLabel] {
                jobs.push((target, layer, probe, fit.clone(), test.clone()));
            }
        }
    }
    let cells: Vec<Result<UnimodalProbeCell>> = jobs
        .par_iter()
        .map(|(target, layer, probe, fit, test)| {
            let data = ProbeDataset::new(
                traces.gather(*layer, fit),
                fit.iter()
                    .map(|&r| probe.label_of(&traces.meta[r]))
                    .collect(),
                n_classes,
            )?;
            let trained = train_probe(
                &data,
                cfg,
                &rng.substream_indexed(probe.name(), (*layer * 2 + *target as usize) as u64),
            )?;
            let test_x = traces.gather(*layer, test);
            let test_y: Vec<usize> = test
                .iter()
                .map(|&r| probe.label_of(&traces.meta[r]))
                .collect();
            Ok(UnimodalProbeCell {
                layer: *layer,
                probe: *probe,
                target: *target,
                accuracy: trained.accuracy(&test_x, &test_y),
                n_test: test.len(),
            })
        })
        .collect();
    cells.into_iter().collect()
}

/// Three disjoint class subsets; fold `f` holds out subset `f`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassFolds {
    pub subsets: [Vec<usize>; 3],
}

/// Evaluation regime of a pair under one fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    /// Both labels drawn from the training subsets.
    Id,
    /// Both labels drawn from the held-out subset.
    Ood,
    /// Exactly one label from each side.
    Sid,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Id => "ID",
            Regime::Ood => "OOD",
            Regime::Sid => "SID",
        }
    }
}

/// Split the class labels into three near-equal disjoint subsets.
pub fn make_class_folds(n_classes: usize, rng: &mut Rng) -> Result<ClassFolds> {
    if n_classes < 3 {
        return Err(ProbeError::FoldError(n_classes));
    }
    let mut classes: Vec<usize> = (0..n_classes).collect();
    rng.shuffle(&mut classes);
    let base = n_classes / 3;
    let extra = n_classes % 3;
    let mut subsets: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut cursor = 0;
    for (i, subset) in subsets.iter_mut().enumerate() {
        let take = base + usize::from(i < extra);
        subset.extend_from_slice(&classes[cursor..cursor + take]);
        cursor += take;
    }
    Ok(ClassFolds { subsets })
}

impl ClassFolds {
    /// Regime of a pair when subset `fold` is held out.
    pub fn regime(&self, fold: usize, meta: &RowMeta) -> Regime {
        let held = &self.subsets[fold];
        let img_held = held.contains(&meta.image_class);
        let cap_held = held.contains(&meta.caption_class);
        match (img_held, cap_held) {
            (true, true) => Regime::Ood,
            (false, false) => Regime::Id,
            _ => Regime::Sid,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyCell {
    pub layer: usize,
    pub target: Modality,
    pub regime: Regime,
    /// Mean accuracy across the three folds.
    pub accuracy: f64,
    /// Total rows evaluated across folds.
    pub n: usize,
}

/// Binary consistency probes trained on ID-composition pairs only and
/// evaluated on ID (held-out rows), OOD, and SID pairs, averaged over the
/// three folds.
///
/// Training rows are balanced 50/50 between consistent and inconsistent
/// pairs to keep the probe from fitting the class prior.
pub fn consistency_probe_suite(
    traces: &TraceSet,
    folds: &ClassFolds,
    cfg: &ProbeConfig,
    rng: &Rng,
) -> Result<Vec<ConsistencyCell>> {
    let mut jobs = Vec::new();
    for target in [Modality::Image, Modality::Caption] {
        let rows = traces.rows_for_target(target);
        if rows.is_empty() {
            continue;
        }
        for fold in 0..3 {
            let mut id_rows = Vec::new();
            let mut ood_rows = Vec::new();
            let mut sid_rows = Vec::new();
            for &r in &rows {
                match folds.regime(fold, &traces.meta[r]) {
                    Regime::Id => id_rows.push(r),
                    Regime::Ood => ood_rows.push(r),
                    Regime::Sid => sid_rows.push(r),
                }
            }
            let (fit, id_test) = split_rows(&id_rows, 0.2, rng.seed() ^ (fold as u64 + 0xc0));
            let fit = balance_by_consistency(&fit, traces, rng.seed() ^ 0xba1);
            for layer in 0..traces.n_layers() {
                jobs.push((
                    target,
                    fold,
                    layer,
                    fit.clone(),
                    id_test.clone(),
                    ood_rows.clone(),
                    sid_rows.clone(),
                ));
            }
        }
    }

    type FoldCell = (usize, Modality, Regime, f64, usize);
    let results: Vec<Result<Vec<FoldCell>>> = jobs
        .par_iter()
        .map(|(target, fold, layer, fit, id_test, ood_rows, sid_rows)| {
            let consistency_label = |r: usize| -> usize { usize::from(traces.meta[r].consistent) };
            let data = ProbeDataset::new(
                traces.gather(*layer, fit),
                fit.iter().map(|&r| consistency_label(r)).collect(),
                2,
            )?;
            let probe = train_probe(
                &data,
                cfg,
                &rng.substream_indexed(
                    "consistency",
                    (*fold * 64 + *layer * 2 + *target as usize) as u64,
                ),
            )?;
            let mut out = Vec::new();
            for (regime, rows) in [
                (Regime::Id, id_test),
                (Regime::Ood, ood_rows),
                (Regime::Sid, sid_rows),
            ] {
                if rows.is_empty() {
                    continue;
                }
                let x = traces.gather(*layer, rows);
                let y: Vec<usize> = rows.iter().map(|&r| consistency_label(r)).collect();
                out.push((*layer, *target, regime, probe.accuracy(&x, &y), rows.len()));
            }
            Ok(out)
        })
        .collect();

    // Average the per-fold accuracies per (layer, target, regime).
    let mut agg: std::collections::BTreeMap<(usize, usize, usize), (f64, usize, usize)> =
        std::collections::BTreeMap::new();
    for r in results {
        for (layer, target, regime, acc, n) in r? {
            let key = (layer, target as usize, regime as usize);
            let entry = agg.entry(key).or_insert((0.0, 0, 0));
            entry.0 += acc;
            entry.1 += 1;
            entry.2 += n;
        }
    }
    Ok(agg
        .into_iter()
        .map(|((layer, target, regime), (sum, folds, n))| ConsistencyCell {
            layer,
            target: if target == 0 {
                Modality::Image
            } else {
                Modality::Caption
            },
            regime: match regime {
                0 => Regime::Id,
                1 => Regime::Ood,
                _ => Regime::Sid,
            },
            accuracy: sum / folds as f64,
            n,
        })
        .collect())
}

/// Deterministically subsample the majority consistency class down to the
/// minority count (hash-ordered), yielding a 50/50 training mixture.
fn balance_by_consistency(rows: &[usize], traces: &TraceSet, seed: u64) -> Vec<usize> {
    let consistent: Vec<usize> = rows
        .iter()
        .copied()
        .filter(|&r| traces.meta[r].consistent)
        .collect();
    let inconsistent: Vec<usize> = rows
        .iter()
        .copied()
        .filter(|&r| !traces.meta[r].consistent)
        .collect();
    let keep = consistent.len().min(inconsistent.len());
    let trim = |mut v: Vec<usize>| -> Vec<usize> {
        v.sort_by_key(|&r| mix64(r as u64 ^ seed));
        v.truncate(keep);
        v
    };
    let mut out = trim(consistent);
    out.extend(trim(inconsistent));
    out.sort_unstable();
    out
}
