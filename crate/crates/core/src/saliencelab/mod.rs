//! Representational-salience analysis: K-Means over inconsistent-input
//! activations, V-Measure against image vs. caption labels, the salience
//! gap (target minus non-target V), and its correlation with behavioral
//! accuracy.

use crate::conflictgen::Modality;
use crate::numerics::{Mat, Rng};
use crate::probelab::TraceSet;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SalienceError {
    #[error("k-means needs at least k={k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("assignment/label lengths differ: {left} vs {right}")]
    ShapeMismatch { left: usize, right: usize },
    #[error("correlation needs >= 3 points, got {0}")]
    TooFewConditions(usize),
    #[error("correlation undefined: zero variance in {0}")]
    UndefinedCorrelation(&'static str),
    #[error("salience profile requires inconsistent pairs only")]
    ConsistentPairPresent,
    #[error("numerics: {0}")]
    Numerics(#[from] crate::numerics::NumericsError),
}

pub type Result<T> = std::result::Result<T, SalienceError>;

/// Fitted K-Means model: k centroids with assignments and inertia.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Mat,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub seed: u64,
    /// Final inertia of every restart, best of which was kept.
    pub restart_inertias: Vec<f64>,
}

const MAX_LLOYD_ITERS: usize = 300;

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc
}

/// K-Means with k-means++ seeding and Lloyd iteration to an assignment
/// fixpoint (or 300 iterations); the best of `n_init` restarts by inertia
/// is kept. Empty clusters are re-seeded to the farthest point.
pub fn kmeans_fit(points: &Mat, k: usize, rng: &Rng, n_init: usize) -> Result<ClusterModel> {
    let n = points.rows();
    if n < k || k == 0 {
        return Err(SalienceError::TooFewPoints { n, k });
    }
    let mut best: Option<ClusterModel> = None;
    let mut restart_inertias = Vec::with_capacity(n_init);
    for restart in 0..n_init.max(1) {
        let mut restart_rng = rng.substream_indexed("kmeans_restart", restart as u64);
        let model = lloyd(points, k, &mut restart_rng, rng.seed());
        restart_inertias.push(model.inertia);
        if best.as_ref().is_none_or(|b| model.inertia < b.inertia) {
            best = Some(model);
        }
    }
    let mut best = best.expect("at least one restart");
    best.restart_inertias = restart_inertias;
    Ok(best)
}

fn lloyd(points: &Mat, k: usize, rng: &mut Rng, seed: u64) -> ClusterModel {
    let n = points.rows();
    let d = points.cols();

    // k-means++ seeding.
    let mut centroids = Mat::zeros(k, d);
    let first = rng.below(n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        let chosen = if total <= 0.0 {
            rng.below(n)
        } else {
            let mut dart = rng.next_f64() * total;
            let mut pick = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                dart -= w;
                if dart <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centroids.row_mut(c).copy_from_slice(points.row(chosen));
        for i in 0..n {
            let d2 = sq_dist(points.row(i), centroids.row(c));
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
        }
    }

    let mut assignments = vec![0usize; n];
    for _ in 0..MAX_LLOYD_ITERS {
        // Assignment step; ties go to the lowest cluster index.
        let mut changed = false;
        for i in 0..n {
            let mut best_c = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d2 = sq_dist(points.row(i), centroids.row(c));
                if d2 < best_d {
                    best_d = d2;
                    best_c = c;
                }
            }
            if assignments[i] != best_c {
                assignments[i] = best_c;
                changed = true;
            }
        }

        // Update step with farthest-point repair for empty clusters.
        let mut counts = vec![0usize; k];
        let mut sums = vec![0.0f64; k * d];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(points.row(i)) {
                *s += v as f64;
            }
        }
        let mut claimed: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] == 0 {
                let mut far_i = 0usize;
                let mut far_d = -1.0f64;
                for i in 0..n {
                    if claimed.contains(&i) || counts[assignments[i]] <= 1 {
                        continue;
                    }
                    let d2 = sq_dist(points.row(i), centroids.row(assignments[i]));
                    if d2 > far_d {
                        far_d = d2;
                        far_i = i;
                    }
                }
                claimed.push(far_i);
                let old = assignments[far_i];
                counts[old] -= 1;
                for (s, &v) in sums[old * d..(old + 1) * d]
                    .iter_mut()
                    .zip(points.row(far_i))
                {
                    *s -= v as f64;
                }
                counts[c] = 1;
                for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(points.row(far_i)) {
                    *s = v as f64;
                }
                assignments[far_i] = c;
                changed = true;
            }
        }
        for c in 0..k {
            let row = centroids.row_mut(c);
            for (j, r) in row.iter_mut().enumerate() {
                *r = (sums[c * d + j] / counts[c] as f64) as f32;
            }
        }
        if !changed {
            break;
        }
    }

    let inertia: f64 = (0..n)
        .map(|i| sq_dist(points.row(i), centroids.row(assignments[i])))
        .sum();
    ClusterModel {
        k,
        centroids,
        assignments,
        inertia,
        seed,
        restart_inertias: Vec::new(),
    }
}

/// Homogeneity, completeness, and their harmonic mean (beta = 1), from
/// 64-bit contingency-table entropies.
///
/// Conventions: `H(labels) = 0` gives h = 1; `H(clusters) = 0` gives
/// c = 1; `h + c = 0` gives v = 0.
pub fn v_measure(assignments: &[usize], labels: &[usize]) -> Result<(f64, f64, f64)> {
    if assignments.len() != labels.len() {
        return Err(SalienceError::ShapeMismatch {
            left: assignments.len(),
            right: labels.len(),
        });
    }
    let n = assignments.len();
    if n == 0 {
        return Err(SalienceError::TooFewPoints { n: 0, k: 1 });
    }
    let mut joint: std::collections::BTreeMap<(usize, usize), usize> =
        std::collections::BTreeMap::new();
    let mut label_counts: std::collections::BTreeMap<usize, usize> =
        std::collections::BTreeMap::new();
    let mut cluster_counts: std::collections::BTreeMap<usize, usize> =
        std::collections::BTreeMap::new();
    for (&c, &l) in assignments.iter().zip(labels) {
        *joint.entry((l, c)).or_insert(0) += 1;
        *label_counts.entry(l).or_insert(0) += 1;
        *cluster_counts.entry(c).or_insert(0) += 1;
    }
    let nf = n as f64;
    let entropy = |counts: &std::collections::BTreeMap<usize, usize>| -> f64 {
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / nf;
                -p * p.ln()
            })
            .sum()
    };
    let h_labels = entropy(&label_counts);
    let h_clusters = entropy(&cluster_counts);
    // Conditional entropies from the joint distribution.
    let mut h_l_given_c = 0.0f64;
    let mut h_c_given_l = 0.0f64;
    for (&(l, c), &count) in &joint {
        let p_joint = count as f64 / nf;
        let p_c = cluster_counts[&c] as f64 / nf;
        let p_l = label_counts[&l] as f64 / nf;
        h_l_given_c -= p_joint * (p_joint / p_c).ln();
        h_c_given_l -= p_joint * (p_joint / p_l).ln();
    }
    let h = if h_labels == 0.0 {
        1.0
    } else {
        1.0 - h_l_given_c / h_labels
    };
    let c = if h_clusters == 0.0 {
        1.0
    } else {
        1.0 - h_c_given_l / h_clusters
    };
    let (h, c) = (h.clamp(0.0, 1.0), c.clamp(0.0, 1.0));
    let v = if h + c == 0.0 { 0.0 } else { 2.0 * h * c / (h + c) };
    Ok((h, c, v))
}

/// One modality's averaged clustering agreement.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Hcv {
    pub h: f64,
    pub c: f64,
    pub v: f64,
}

/// Per-layer V-Measure of K-Means assignments against image and caption
/// labels, averaged across seeds.
#[derive(Debug, Clone, Serialize)]
pub struct LayerSalience {
    pub layer: usize,
    pub image: Hcv,
    pub caption: Hcv,
    pub n_seeds: usize,
}

impl LayerSalience {
    /// V-gap: target-modality V minus non-target V.
    pub fn gap(&self, target: Modality) -> f64 {
        match target {
            Modality::Image => self.image.v - self.caption.v,
            Modality::Caption => self.caption.v - self.image.v,
        }
    }
}

/// One K-Means seed's scores at one layer.
#[derive(Debug, Clone, Serialize)]
pub struct SeedSalience {
    pub layer: usize,
    pub seed: usize,
    pub image: Hcv,
    pub caption: Hcv,
}

/// Per-seed clustering scores for every layer (the unaveraged data
/// behind [`salience_profile`]).
pub fn salience_profile_by_seed(
    traces: &TraceSet,
    n_classes: usize,
    rng: &Rng,
    n_seeds: usize,
    n_init: usize,
) -> Result<Vec<SeedSalience>> {
    if traces.meta.iter().any(|m| m.consistent) {
        return Err(SalienceError::ConsistentPairPresent);
    }
    let image_labels: Vec<usize> = traces.meta.iter().map(|m| m.image_class).collect();
    let caption_labels: Vec<usize> = traces.meta.iter().map(|m| m.caption_class).collect();

    let jobs: Vec<(usize, usize)> = (0..traces.n_layers())
        .flat_map(|layer| (0..n_seeds).map(move |seed| (layer, seed)))
        .collect();
    let fits: Vec<Result<SeedSalience>> = jobs
        .par_iter()
        .map(|&(layer, seed)| {
            let model = kmeans_fit(
                &traces.per_layer[layer],
                n_classes,
                &rng.substream_indexed("salience", (layer * 1000 + seed) as u64),
                n_init,
            )?;
            let (hi, ci, vi) = v_measure(&model.assignments, &image_labels)?;
            let (hc, cc, vc) = v_measure(&model.assignments, &caption_labels)?;
            Ok(SeedSalience {
                layer,
                seed,
                image: Hcv { h: hi, c: ci, v: vi },
                caption: Hcv { h: hc, c: cc, v: vc },
            })
        })
        .collect();
    fits.into_iter().collect()
}

/// Cluster every layer's activations with |C| clusters and score the
/// assignments against both modalities' labels, averaging `n_seeds`
/// K-Means initializations.
pub fn salience_profile(
    traces: &TraceSet,
    n_classes: usize,
    rng: &Rng,
    n_seeds: usize,
    n_init: usize,
) -> Result<Vec<LayerSalience>> {
    let detail = salience_profile_by_seed(traces, n_classes, rng, n_seeds, n_init)?;
    let mut out: Vec<LayerSalience> = (0..traces.n_layers())
        .map(|layer| LayerSalience {
            layer,
            image: Hcv::default(),
            caption: Hcv::default(),
            n_seeds,
        })
        .collect();
    for fit in detail {
        let cell = &mut out[fit.layer];
        cell.image.h += fit.image.h / n_seeds as f64;
        cell.image.c += fit.image.c / n_seeds as f64;
        cell.image.v += fit.image.v / n_seeds as f64;
        cell.caption.h += fit.caption.h / n_seeds as f64;
        cell.caption.c += fit.caption.c / n_seeds as f64;
        cell.caption.v += fit.caption.v / n_seeds as f64;
    }
    Ok(out)
}

/// Pearson product-moment correlation with a two-sided p-value from the
/// t approximation.
pub fn correlate_gap_accuracy(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    let n = points.len();
    if n < 3 {
        return Err(SalienceError::TooFewConditions(n));
    }
    let nf = n as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in points {
        sxx += (x - mean_x) * (x - mean_x);
        syy += (y - mean_y) * (y - mean_y);
        sxy += (x - mean_x) * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(SalienceError::UndefinedCorrelation("x"));
    }
    if syy == 0.0 {
        return Err(SalienceError::UndefinedCorrelation("y"));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = nf - 2.0;
    let p = if (1.0 - r * r) <= f64::EPSILON {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        reg_inc_beta(df / 2.0, 0.5, df / (df + t * t))
    };
    Ok((r, p))
}

/// ln Γ via the Lanczos approximation (g = 7, n = 9).
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta I_x(a, b) via the Lentz continued
/// fraction.
fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() - (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b));
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 200;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests;
