use super::*;
use crate::conflictgen::{generate_synthetic, SynthSpec};
use crate::model::{
    planted_caption_pathway_model, ModelConfig, TinyVlm, PLANTED_CAPTION_HEAD,
};

fn planted_setup(n_images: usize, seed: u64) -> (TinyVlm, EvalSet, Vocab) {
    let n_classes = 6;
    let model = planted_caption_pathway_model(n_classes);
    let vocab = Vocab::new(n_classes);
    let spec = SynthSpec {
        n_classes,
        noise_sigma: 0.0,
        ..SynthSpec::default()
    };
    let classes = ClassSet::numbered(n_classes);
    let mut rng = Rng::new(seed);
    let images = generate_synthetic(&spec, n_images, &mut rng);
    let eval = EvalSet::build(&images, &classes, &vocab, 0, n_images, &mut rng).unwrap();
    (model, eval, vocab)
}

fn micro_model_setup(seed: u64) -> (TinyVlm, EvalSet) {
    let n_classes = 4;
    let vocab = Vocab::new(n_classes);
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 16,
        vocab_size: vocab.size(),
        n_image_tokens: 4,
        max_seq: 24,
        n_classes,
        patch_dim: 4,
    };
    let spec = SynthSpec {
        n_classes,
        grid_size: 2,
        patch_dim: 4,
        noise_sigma: 0.05,
    };
    let classes = ClassSet::numbered(n_classes);
    let mut rng = Rng::new(seed);
    let model = TinyVlm::new(cfg, &mut rng).unwrap();
    let images = generate_synthetic(&spec, 24, &mut rng);
    let eval = EvalSet::build(&images, &classes, &vocab, 0, 24, &mut rng).unwrap();
    (model, eval)
}

#[test]
fn alpha_grid_standard_shape() {
    let grid = AlphaGrid::standard();
    assert_eq!(grid.len(), 21);
    assert_eq!(grid.values()[0], -10.0);
    assert_eq!(*grid.values().last().unwrap(), 10.0);
    assert!(grid.values().contains(&0.0));
    assert_eq!(grid.values()[grid.baseline_index()], 1.0);
    for w in grid.values().windows(2) {
        assert_eq!(w[1] - w[0], 1.0);
    }
}

#[test]
fn alpha_one_column_equals_uninterfered_baseline() {
    let (model, eval) = micro_model_setup(1);
    let grid = AlphaGrid::standard();
    let curve = sweep_head(&model, &eval, 0, 1, &grid).unwrap();
    let b = grid.baseline_index();
    for target in [Modality::Image, Modality::Caption] {
        let series = curve.series(target);
        let (t, nt, o) = super::portions(&model, eval.items_for(target), None).unwrap();
        assert_eq!(series.target[b], t);
        assert_eq!(series.non_target[b], nt);
        assert_eq!(series.other[b], o);
        assert_eq!(curve.baseline[target as usize], t);
    }
}

#[test]
fn portions_sum_to_one_across_grid() {
    let (model, eval) = micro_model_setup(2);
    let grid = AlphaGrid::standard();
    let curve = sweep_head(&model, &eval, 1, 0, &grid).unwrap();
    for series in &curve.by_target {
        for i in 0..grid.len() {
            let sum = series.target[i] + series.non_target[i] + series.other[i];
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(series.target[i] >= 0.0 && series.target[i] <= 1.0);
        }
    }
}

#[test]
fn planted_caption_head_curve_is_caption_promoting() {
    let (model, eval, _) = planted_setup(40, 3);
    let grid = AlphaGrid::standard();
    let (layer, head) = PLANTED_CAPTION_HEAD;
    let curve = sweep_head(&model, &eval, layer, head, &grid).unwrap();
    // Caption-target accuracy never decreases along α.
    let cap = &curve.series(Modality::Caption).target;
    for w in cap.windows(2) {
        assert!(w[1] >= w[0] - 1e-12, "caption portion dropped: {w:?}");
    }
    assert!(cap.last().unwrap() > &0.95);
    assert!(cap.first().unwrap() < &0.05);
    let cls = classify_head(&curve, 0.05);
    assert_eq!(cls.head_type, HeadType::CaptionPromotion);
    assert!(cls.complementarity_ok);
}

#[test]
fn alpha_zero_matches_ablated_model_portions() {
    let (model, eval, _) = planted_setup(30, 4);
    let grid = AlphaGrid::standard();
    let (layer, head) = PLANTED_CAPTION_HEAD;
    let curve = sweep_head(&model, &eval, layer, head, &grid).unwrap();
    let zero_idx = grid.values().iter().position(|&a| a == 0.0).unwrap();
    // Oracle: zero the head's Wo rows (full structural ablation). On a
    // one-layer model this only affects the answer position's logits.
    let mut ablated = model.clone();
    let d_head = ablated.cfg.d_head();
    for r in head * d_head..(head + 1) * d_head {
        for c in 0..ablated.cfg.d_model {
            ablated.params.blocks[layer].wo.set(r, c, 0.0);
        }
    }
    for target in [Modality::Image, Modality::Caption] {
        let (t, nt, o) = super::portions(&ablated, eval.items_for(target), None).unwrap();
        let series = curve.series(target);
        assert!((series.target[zero_idx] - t).abs() < 1e-12);
        assert!((series.non_target[zero_idx] - nt).abs() < 1e-12);
        assert!((series.other[zero_idx] - o).abs() < 1e-12);
    }
}

#[test]
fn sweep_all_heads_covers_and_repeats() {
    let (model, eval) = micro_model_setup(5);
    let grid = AlphaGrid::standard();
    let curves = sweep_all_heads(&model, &eval, &grid).unwrap();
    assert_eq!(curves.len(), model.cfg.n_layers * model.cfg.n_heads);
    // Layer-major order.
    for (i, c) in curves.iter().enumerate() {
        assert_eq!(c.layer, i / model.cfg.n_heads);
        assert_eq!(c.head, i % model.cfg.n_heads);
    }
    // Deterministic across runs.
    let again = sweep_all_heads(&model, &eval, &grid).unwrap();
    for (a, b) in curves.iter().zip(&again) {
        assert_eq!(a.by_target[0].target, b.by_target[0].target);
        assert_eq!(a.by_target[1].target, b.by_target[1].target);
    }
    // Budget arithmetic: heads x grid x (items per target x 2).
    assert_eq!(
        sweep_budget(&model, &eval, &grid),
        model.cfg.n_layers * model.cfg.n_heads * 21 * eval.total_items()
    );
}

fn synthetic_curve(
    img_target: Vec<f64>,
    cap_target: Vec<f64>,
) -> HeadCurve {
    let mk = |target: Vec<f64>| {
        let non_target: Vec<f64> = target.iter().map(|t| 1.0 - t).collect();
        let other = vec![0.0; target.len()];
        CurveSeries {
            target,
            non_target,
            other,
        }
    };
    let b_img = img_target[11];
    let b_cap = cap_target[11];
    HeadCurve {
        layer: 0,
        head: 0,
        by_target: [mk(img_target), mk(cap_target)],
        baseline: [b_img, b_cap],
    }
}

fn ramp(from: f64, to: f64) -> Vec<f64> {
    (0..21).map(|i| from + (to - from) * i as f64 / 20.0).collect()
}

#[test]
fn classify_definitional_fixtures() {
    // Both target portions rising: a router.
    let router = synthetic_curve(ramp(0.3, 0.8), ramp(0.4, 0.9));
    assert_eq!(classify_head(&router, 0.05).head_type, HeadType::Router);

    // Image answers rise under an image query and the caption target
    // falls under a caption query: image promotion.
    let image = synthetic_curve(ramp(0.3, 0.9), ramp(0.8, 0.2));
    assert_eq!(classify_head(&image, 0.05).head_type, HeadType::ImagePromotion);

    let caption = synthetic_curve(ramp(0.9, 0.3), ramp(0.2, 0.8));
    assert_eq!(
        classify_head(&caption, 0.05).head_type,
        HeadType::CaptionPromotion
    );
}

#[test]
fn classify_noisy_flat_curve_is_unclassified() {
    let mut rng = Rng::new(6);
    let noisy: Vec<f64> = (0..21)
        .map(|_| 0.5 + (rng.next_f64() - 0.5) * 0.6)
        .collect();
    let flat = synthetic_curve(noisy.clone(), noisy);
    assert_eq!(classify_head(&flat, 0.05).head_type, HeadType::Unclassified);
}

#[test]
fn shrinking_epsilon_only_grows_the_unclassified_set() {
    let mut rng = Rng::new(7);
    for _ in 0..200 {
        let kind = rng.below(4);
        let noise = rng.next_f64() * 0.2;
        let mut mk = |from: f64, to: f64| -> Vec<f64> {
            ramp(from, to)
                .into_iter()
                .map(|v| (v + (rng.next_f64() - 0.5) * noise).clamp(0.0, 1.0))
                .collect()
        };
        let curve = match kind {
            0 => synthetic_curve(mk(0.2, 0.8), mk(0.3, 0.9)),
            1 => synthetic_curve(mk(0.2, 0.9), mk(0.9, 0.2)),
            2 => synthetic_curve(mk(0.9, 0.2), mk(0.2, 0.9)),
            _ => synthetic_curve(mk(0.5, 0.5), mk(0.5, 0.5)),
        };
        let wide = classify_head(&curve, 0.08);
        let narrow = classify_head(&curve, 0.02);
        if narrow.head_type != HeadType::Unclassified {
            assert_ne!(
                wide.head_type,
                HeadType::Unclassified,
                "classified at ε=0.02 but not at ε=0.08"
            );
        }
    }
}

#[test]
fn ranking_single_classified_head_tops_lists() {
    let strong = synthetic_curve(ramp(0.3, 0.7), ramp(0.35, 0.75));
    let flat = {
        let mut c = synthetic_curve(vec![0.5; 21], vec![0.5; 21]);
        c.head = 1;
        c
    };
    let curves = vec![strong, flat];
    let classifications: Vec<HeadClassification> =
        curves.iter().map(|c| classify_head(c, 0.05)).collect();
    assert_eq!(classifications[0].head_type, HeadType::Router);
    assert_eq!(classifications[1].head_type, HeadType::Unclassified);
    let ranking = rank_heads(&classifications, &curves);
    let routers = &ranking
        .top_by_trend
        .iter()
        .find(|(t, _)| *t == HeadType::Router)
        .unwrap()
        .1;
    assert_eq!(routers, &vec![(0, 0)]);
    let routers_i = &ranking
        .top_by_intervenability
        .iter()
        .find(|(t, _)| *t == HeadType::Router)
        .unwrap()
        .1;
    assert_eq!(routers_i, &vec![(0, 0)]);
    let overlap = &ranking
        .overlap
        .iter()
        .find(|(t, _)| *t == HeadType::Router)
        .unwrap()
        .1;
    assert_eq!(overlap, &vec![(0, 0)]);
}

#[test]
fn delta1_zero_when_baseline_is_best() {
    // Curve peaking exactly at α = 1 (index 11).
    let mut target = vec![0.2; 21];
    target[11] = 0.9;
    // Keep complementarity satisfied: mirror into non-target.
    let curve = synthetic_curve(target.clone(), target);
    let cls = classify_head(&curve, 0.05);
    let ranking = rank_heads(&[cls], &[curve]);
    assert_eq!(ranking.scores[0].delta1, 0.0);
}

#[test]
fn delta2_orders_strong_above_weak() {
    let strong = synthetic_curve(ramp(0.3, 0.7), ramp(0.3, 0.7));
    let weak = {
        let mut c = synthetic_curve(ramp(0.45, 0.58), ramp(0.45, 0.58));
        c.head = 1;
        c
    };
    let curves = vec![weak, strong];
    let classifications: Vec<HeadClassification> =
        curves.iter().map(|c| classify_head(c, 0.05)).collect();
    let ranking = rank_heads(&classifications, &curves);
    let routers = &ranking
        .top_by_trend
        .iter()
        .find(|(t, _)| *t == HeadType::Router)
        .unwrap()
        .1;
    assert_eq!(routers[0], (0, 0));
    assert!(ranking.scores[1].delta2 > ranking.scores[0].delta2);
}

#[test]
fn transfer_delta_arithmetic_matches_reported_convention() {
    // Reported-style cell: original 91.7, intervened 95.2 → Δ = +3.5.
    let cell = TransferCell {
        dataset: "reference".into(),
        target: Modality::Image,
        original: 0.917,
        intervened: 0.952,
        delta: 0.952 - 0.917,
    };
    assert!((cell.delta - 0.035).abs() < 1e-12);
    // And the sign convention for a gap shift: 0.567 → 0.771 is +0.204.
    let gap = GapShiftCell {
        dataset: "reference".into(),
        target: Modality::Image,
        gap_before: 0.567,
        gap_after: 0.771,
        delta: 0.771 - 0.567,
    };
    assert!((gap.delta - 0.204).abs() < 1e-12);
}

#[test]
fn planted_transfer_signs_minus_plus() {
    let (model, _, vocab) = planted_setup(30, 8);
    // Two held-out datasets from fresh seeds.
    let mut datasets = Vec::new();
    for (i, seed) in [(0usize, 100u64), (1, 200)] {
        let spec = SynthSpec {
            n_classes: 6,
            noise_sigma: 0.0,
            ..SynthSpec::default()
        };
        let classes = ClassSet::numbered(6);
        let mut rng = Rng::new(seed);
        let images = generate_synthetic(&spec, 30, &mut rng);
        let eval = EvalSet::build(&images, &classes, &vocab, 0, 30, &mut rng).unwrap();
        datasets.push((format!("toy_{i}"), eval));
    }
    let cells = transfer_eval(&model, PLANTED_CAPTION_HEAD, 10.0, &datasets).unwrap();
    assert_eq!(cells.len(), 4);
    for cell in &cells {
        match cell.target {
            Modality::Image => assert!(cell.delta < 0.0, "image Δ should be negative: {cell:?}"),
            Modality::Caption => assert!(cell.delta > 0.0, "caption Δ should be positive: {cell:?}"),
        }
    }
}

#[test]
fn alpha_one_gap_shift_is_exactly_zero() {
    let (model, eval, _) = planted_setup(24, 9);
    let datasets = vec![("base".to_string(), eval)];
    let cells = post_intervention_salience(
        &model,
        PLANTED_CAPTION_HEAD,
        1.0,
        &datasets,
        6,
        &Rng::new(10),
        2,
        2,
    )
    .unwrap();
    for cell in &cells {
        assert_eq!(cell.delta, 0.0, "α=1 must not move the gap: {cell:?}");
    }
}

#[test]
fn planted_caption_head_shifts_gap_toward_caption() {
    let (model, eval, _) = planted_setup(36, 11);
    let datasets = vec![("base".to_string(), eval)];
    let cells = post_intervention_salience(
        &model,
        PLANTED_CAPTION_HEAD,
        10.0,
        &datasets,
        6,
        &Rng::new(12),
        2,
        2,
    )
    .unwrap();
    for cell in &cells {
        match cell.target {
            Modality::Image => assert!(cell.delta < 0.0, "{cell:?}"),
            Modality::Caption => assert!(cell.delta > 0.0, "{cell:?}"),
        }
    }
}
