use super::*;
use crate::numerics::Rng;
use crate::probelab::RowMeta;
use proptest::prelude::*;

fn blob_points(centers: &[(f32, f32)], per: usize, sigma: f32, seed: u64) -> (Mat, Vec<usize>) {
    let mut rng = Rng::new(seed);
    let n = centers.len() * per;
    let mut pts = Mat::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for (b, &(cx, cy)) in centers.iter().enumerate() {
        for i in 0..per {
            let r = b * per + i;
            pts.set(r, 0, cx + rng.normal() * sigma);
            pts.set(r, 1, cy + rng.normal() * sigma);
            labels.push(b);
        }
    }
    (pts, labels)
}

#[test]
fn kmeans_k1_is_the_mean() {
    let pts = Mat::from_vec(4, 2, vec![0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 2.0, 2.0]).unwrap();
    let model = kmeans_fit(&pts, 1, &Rng::new(1), 3).unwrap();
    assert!((model.centroids.get(0, 0) - 1.0).abs() < 1e-6);
    assert!((model.centroids.get(0, 1) - 1.0).abs() < 1e-6);
    assert!(model.assignments.iter().all(|&c| c == 0));
}

#[test]
fn kmeans_separated_blobs_match_nearest_centroid_oracle() {
    let (pts, labels) = blob_points(&[(-5.0, 0.0), (5.0, 0.0)], 40, 0.4, 2);
    let model = kmeans_fit(&pts, 2, &Rng::new(3), 3).unwrap();
    // Brute-force oracle: every point must sit with its nearest centroid.
    for i in 0..pts.rows() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..2 {
            let mut d2 = 0.0f64;
            for j in 0..2 {
                let diff = pts.get(i, j) as f64 - model.centroids.get(c, j) as f64;
                d2 += diff * diff;
            }
            if d2 < best_d {
                best_d = d2;
                best = c;
            }
        }
        assert_eq!(model.assignments[i], best);
    }
    // And the clustering recovers the blobs up to relabeling.
    let (_, _, v) = v_measure(&model.assignments, &labels).unwrap();
    assert!((v - 1.0).abs() < 1e-12);
}

#[test]
fn kmeans_k_equals_n_zero_inertia() {
    let (pts, _) = blob_points(&[(0.0, 0.0), (3.0, 1.0), (7.0, 2.0)], 2, 0.5, 4);
    let model = kmeans_fit(&pts, pts.rows(), &Rng::new(5), 3).unwrap();
    assert!(model.inertia < 1e-9, "inertia {}", model.inertia);
}

#[test]
fn kmeans_needs_enough_points() {
    let pts = Mat::zeros(2, 3);
    assert!(matches!(
        kmeans_fit(&pts, 5, &Rng::new(6), 1),
        Err(SalienceError::TooFewPoints { .. })
    ));
}

#[test]
fn kmeans_restart_dominance() {
    let (pts, _) = blob_points(&[(-3.0, 0.0), (3.0, 0.0), (0.0, 4.0)], 30, 1.2, 7);
    let model = kmeans_fit(&pts, 3, &Rng::new(8), 3).unwrap();
    assert_eq!(model.restart_inertias.len(), 3);
    for &ri in &model.restart_inertias {
        assert!(model.inertia <= ri + 1e-12);
    }
}

#[test]
fn kmeans_is_deterministic() {
    let (pts, _) = blob_points(&[(-2.0, 1.0), (2.0, -1.0)], 25, 0.8, 9);
    let a = kmeans_fit(&pts, 2, &Rng::new(10), 3).unwrap();
    let b = kmeans_fit(&pts, 2, &Rng::new(10), 3).unwrap();
    assert_eq!(a.assignments, b.assignments);
    assert_eq!(a.centroids.data(), b.centroids.data());
}

#[test]
fn v_measure_perfect_clustering() {
    let labels = vec![0, 0, 1, 1, 2, 2];
    let relabeled = vec![2, 2, 0, 0, 1, 1];
    let (h, c, v) = v_measure(&relabeled, &labels).unwrap();
    assert_eq!((h, c, v), (1.0, 1.0, 1.0));
}

#[test]
fn v_measure_independence_case() {
    let labels = vec![0, 1, 0, 1];
    let clusters = vec![0, 0, 1, 1];
    let (h, c, v) = v_measure(&clusters, &labels).unwrap();
    assert!(h.abs() < 1e-12 && c.abs() < 1e-12 && v.abs() < 1e-12);
}

#[test]
fn v_measure_matches_contingency_entropy_oracle() {
    // Independent oracle: entropies via H(A|B) = H(A,B) - H(B) over raw
    // count tables, sidestepping the implementation's conditional form.
    let labels = vec![0usize, 0, 1, 1, 1, 2];
    let clusters = vec![0usize, 0, 0, 1, 1, 1];
    let (h, c, v) = v_measure(&clusters, &labels).unwrap();
    let (oh, oc, ov) = oracle_hcv(&clusters, &labels);
    assert!((h - oh).abs() < 1e-12, "{h} vs {oh}");
    assert!((c - oc).abs() < 1e-12);
    assert!((v - ov).abs() < 1e-12);
    // Cross-checked reference values (sklearn) for the same input.
    assert!((h - 0.370662957923173).abs() < 1e-9);
    assert!((c - 0.5408520829727552).abs() < 1e-9);
    assert!((v - 0.43986950051102847).abs() < 1e-9);
}

#[test]
fn v_measure_reference_mixed_case() {
    let labels = vec![0usize, 0, 1, 1, 2, 0, 4];
    let clusters = vec![1usize, 0, 0, 0, 0, 1, 0];
    let (h, c, v) = v_measure(&clusters, &labels).unwrap();
    assert!((h - 0.25487006300775333).abs() < 1e-9);
    assert!((c - 0.544032002266503).abs() < 1e-9);
    assert!((v - 0.34712007071429435).abs() < 1e-9);
}

#[test]
fn v_measure_length_mismatch() {
    assert!(matches!(
        v_measure(&[0, 1], &[0]),
        Err(SalienceError::ShapeMismatch { .. })
    ));
}

pub(super) fn oracle_hcv(clusters: &[usize], labels: &[usize]) -> (f64, f64, f64) {
    let n = labels.len() as f64;
    let ent = |xs: &[usize]| -> f64 {
        let mut counts = std::collections::HashMap::new();
        for &x in xs {
            *counts.entry(x).or_insert(0usize) += 1;
        }
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let joint: Vec<usize> = clusters
        .iter()
        .zip(labels)
        .map(|(&c, &l)| c * 1_000_003 + l)
        .collect();
    let h_joint = ent(&joint);
    let h_labels = ent(labels);
    let h_clusters = ent(clusters);
    let h_l_given_c = h_joint - h_clusters;
    let h_c_given_l = h_joint - h_labels;
    let h = if h_labels == 0.0 { 1.0 } else { 1.0 - h_l_given_c / h_labels };
    let c = if h_clusters == 0.0 { 1.0 } else { 1.0 - h_c_given_l / h_clusters };
    let v = if h + c == 0.0 { 0.0 } else { 2.0 * h * c / (h + c) };
    (h, c, v)
}

#[test]
fn salience_profile_planted_structure() {
    // Layer 0 clusters by image label, layer 1 by caption label.
    let n = 90;
    let n_classes = 3;
    let mut rng = Rng::new(11);
    let mut meta = Vec::new();
    let mut layers = vec![Mat::zeros(n, 4); 2];
    for i in 0..n {
        let img = i % n_classes;
        let cap = (img + 1 + rng.below(n_classes - 1)) % n_classes;
        meta.push(RowMeta {
            image_class: img,
            caption_class: cap,
            target: Modality::Image,
            consistent: false,
        });
        for (layer, hot) in [(0usize, img), (1, cap)] {
            let row = layers[layer].row_mut(i);
            for v in row.iter_mut() {
                *v = rng.normal() * 0.05;
            }
            row[hot] += 2.0;
        }
    }
    let traces = crate::probelab::TraceSet {
        per_layer: layers,
        meta,
    };
    let profile = salience_profile(&traces, n_classes, &Rng::new(12), 3, 3).unwrap();
    assert_eq!(profile.len(), 2);
    // The off-modality V stays well below 1: with 3 classes the labels are
    // correlated (caption is drawn from the other two), so it is not 0.
    assert!(profile[0].image.v > 0.9 && profile[0].caption.v < 0.6);
    assert!(profile[1].caption.v > 0.9 && profile[1].image.v < 0.6);
    assert!(profile[0].gap(Modality::Image) > 0.5);
    assert!(profile[1].gap(Modality::Image) < -0.5);
}

#[test]
fn salience_profile_rejects_consistent_pairs() {
    let meta = vec![RowMeta {
        image_class: 0,
        caption_class: 0,
        target: Modality::Image,
        consistent: true,
    }];
    let traces = crate::probelab::TraceSet {
        per_layer: vec![Mat::zeros(1, 2)],
        meta,
    };
    assert!(matches!(
        salience_profile(&traces, 2, &Rng::new(13), 1, 1),
        Err(SalienceError::ConsistentPairPresent)
    ));
}

#[test]
fn pearson_collinear_is_one() {
    let pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 2.0 + 3.0 * i as f64)).collect();
    let (r, p) = correlate_gap_accuracy(&pts).unwrap();
    assert!((r - 1.0).abs() < 1e-12);
    assert!(p < 1e-9);
}

#[test]
fn pearson_mirrored_is_minus_one() {
    let pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 7.0 - 2.0 * i as f64)).collect();
    let (r, _) = correlate_gap_accuracy(&pts).unwrap();
    assert!((r + 1.0).abs() < 1e-12);
}

#[test]
fn pearson_matches_direct_formula_and_reference_p() {
    let pts = [(0.1, 0.3), (0.4, 0.5), (0.8, 0.9), (-0.2, 0.2)];
    let (r, p) = correlate_gap_accuracy(&pts).unwrap();
    // Direct 64-bit formula.
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let direct = sxy / (sxx.sqrt() * syy.sqrt());
    assert!((r - direct).abs() < 1e-12);
    // Cross-checked references (scipy.stats.pearsonr).
    assert!((r - 0.9766989494210985).abs() < 1e-12);
    assert!((p - 0.023301050578901528).abs() < 1e-9, "p = {p}");

    let pts6: Vec<(f64, f64)> = vec![
        (1.0, 1.2),
        (2.0, 1.9),
        (3.0, 3.3),
        (4.0, 3.9),
        (5.0, 5.4),
        (6.0, 5.8),
    ];
    let (r6, p6) = correlate_gap_accuracy(&pts6).unwrap();
    assert!((r6 - 0.9911855418775501).abs() < 1e-12);
    assert!((p6 - 0.00011619958977232594).abs() < 1e-9, "p6 = {p6}");
}

#[test]
fn pearson_rejects_degenerate_inputs() {
    assert!(matches!(
        correlate_gap_accuracy(&[(0.0, 1.0), (1.0, 2.0)]),
        Err(SalienceError::TooFewConditions(2))
    ));
    assert!(matches!(
        correlate_gap_accuracy(&[(1.0, 1.0), (1.0, 2.0), (1.0, 3.0)]),
        Err(SalienceError::UndefinedCorrelation("x"))
    ));
    assert!(matches!(
        correlate_gap_accuracy(&[(1.0, 2.0), (2.0, 2.0), (3.0, 2.0)]),
        Err(SalienceError::UndefinedCorrelation("y"))
    ));
}

proptest! {
    #[test]
    fn v_measure_invariant_to_relabeling(seed in 0u64..300) {
        let mut rng = Rng::new(seed);
        let n = 20 + rng.below(30);
        let assignments: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        let (h, c, v) = v_measure(&assignments, &labels).unwrap();
        // Permute cluster ids.
        let perm = [2usize, 3, 1, 0];
        let relabeled: Vec<usize> = assignments.iter().map(|&a| perm[a]).collect();
        let (h2, c2, v2) = v_measure(&relabeled, &labels).unwrap();
        prop_assert!((h - h2).abs() < 1e-12);
        prop_assert!((c - c2).abs() < 1e-12);
        prop_assert!((v - v2).abs() < 1e-12);
        // Permute label ids.
        let lperm = [1usize, 2, 0];
        let relabeled: Vec<usize> = labels.iter().map(|&l| lperm[l]).collect();
        let (h3, c3, v3) = v_measure(&assignments, &relabeled).unwrap();
        prop_assert!((h - h3).abs() < 1e-12);
        prop_assert!((c - c3).abs() < 1e-12);
        prop_assert!((v - v3).abs() < 1e-12);
    }

    #[test]
    fn v_measure_symmetry(seed in 0u64..300) {
        let mut rng = Rng::new(seed ^ 0x5a5a);
        let n = 10 + rng.below(40);
        let a: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.below(5)).collect();
        let (_, _, v_ab) = v_measure(&a, &b).unwrap();
        let (_, _, v_ba) = v_measure(&b, &a).unwrap();
        prop_assert!((v_ab - v_ba).abs() < 1e-12);
    }

    #[test]
    fn homogeneity_never_drops_under_refinement(seed in 0u64..300) {
        // Splitting one cluster into two can only improve (or keep) how
        // pure each cluster is.
        let mut rng = Rng::new(seed ^ 0x7e7e);
        let n = 12 + rng.below(30);
        let assignments: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        let (h_before, _, _) = v_measure(&assignments, &labels).unwrap();
        // Refine: split cluster 0 by parity of index.
        let refined: Vec<usize> = assignments
            .iter()
            .enumerate()
            .map(|(i, &a)| if a == 0 && i % 2 == 0 { 3 } else { a })
            .collect();
        let (h_after, _, _) = v_measure(&refined, &labels).unwrap();
        prop_assert!(h_after >= h_before - 1e-12, "{h_before} -> {h_after}");
    }

    #[test]
    fn v_measure_agrees_with_oracle_on_random_inputs(seed in 0u64..500) {
        let mut rng = Rng::new(seed ^ 0x1111);
        let n = 1 + rng.below(50);
        let k = 1 + rng.below(8);
        let l = 1 + rng.below(8);
        let assignments: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(l)).collect();
        let (h, c, v) = v_measure(&assignments, &labels).unwrap();
        let (oh, oc, ov) = oracle_hcv(&assignments, &labels);
        prop_assert!((h - oh).abs() < 1e-9);
        prop_assert!((c - oc).abs() < 1e-9);
        prop_assert!((v - ov).abs() < 1e-9);
    }
}
