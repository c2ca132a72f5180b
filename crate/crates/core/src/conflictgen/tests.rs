use super::*;
use crate::numerics::Rng;
use proptest::prelude::*;

fn small_pool(n_classes: usize, n: usize, sigma: f32, seed: u64) -> (SynthSpec, Vec<LabeledImage>) {
    let spec = SynthSpec {
        n_classes,
        noise_sigma: sigma,
        ..SynthSpec::default()
    };
    let mut rng = Rng::new(seed);
    let images = generate_synthetic(&spec, n, &mut rng);
    (spec, images)
}

#[test]
fn false_label_forced_by_two_classes() {
    let classes = ClassSet::new(vec!["cat".into(), "dog".into()]).unwrap();
    let mut rng = Rng::new(1);
    for _ in 0..20 {
        assert_eq!(sample_false_label(0, &classes, &mut rng).unwrap(), 1);
        assert_eq!(sample_false_label(1, &classes, &mut rng).unwrap(), 0);
    }
}

#[test]
fn false_label_single_class_impossible() {
    let classes = ClassSet {
        names: vec!["only".into()],
    };
    let mut rng = Rng::new(1);
    assert!(matches!(
        sample_false_label(0, &classes, &mut rng),
        Err(DataError::ImpossibleConflict)
    ));
}

#[test]
fn false_label_marginal_uniform() {
    let classes = ClassSet::numbered(10);
    let mut rng = Rng::new(3);
    let mut counts = [0usize; 10];
    let n = 100_000;
    for _ in 0..n {
        counts[sample_false_label(4, &classes, &mut rng).unwrap()] += 1;
    }
    assert_eq!(counts[4], 0);
    for (k, &c) in counts.iter().enumerate() {
        if k == 4 {
            continue;
        }
        let freq = c as f64 / n as f64;
        assert!((freq - 1.0 / 9.0).abs() < 0.01, "class {k}: freq {freq}");
    }
}

#[test]
fn figure_style_pairing_is_inconsistent() {
    // An image of a dog captioned "cat" must come out flagged inconsistent.
    let classes = ClassSet::new(vec!["cat".into(), "dog".into(), "frog".into()]).unwrap();
    let (_, images) = small_pool(3, 3, 0.05, 5);
    let dog = images.iter().find(|i| i.class_id == 1).unwrap().clone();
    let mut rng = Rng::new(6);
    let pairs = make_pairs(&[dog], &classes, PairMode::Inconsistent, Modality::Image, &mut rng)
        .unwrap();
    assert!(!pairs[0].consistent);
    assert_ne!(pairs[0].caption_class, pairs[0].image.class_id);
}

#[test]
fn consistent_mode_matches_everywhere() {
    let classes = ClassSet::numbered(6);
    let (_, images) = small_pool(6, 30, 0.05, 7);
    let mut rng = Rng::new(8);
    let pairs =
        make_pairs(&images, &classes, PairMode::Consistent, Modality::Caption, &mut rng).unwrap();
    assert!(pairs.iter().all(|p| p.caption_class == p.image.class_id));
    assert!(pairs.iter().all(|p| p.consistent));
}

#[test]
fn inconsistent_mode_never_matches() {
    let classes = ClassSet::numbered(10);
    let (_, images) = small_pool(10, 100, 0.05, 9);
    let mut rng = Rng::new(10);
    let pairs =
        make_pairs(&images, &classes, PairMode::Inconsistent, Modality::Image, &mut rng).unwrap();
    assert_eq!(pairs.len(), 100);
    assert!(pairs.iter().all(|p| p.caption_class != p.image.class_id));
    // All combinations drawn from the |C|^2 - |C| = 90 possible ones.
    let combos: std::collections::HashSet<(usize, usize)> = pairs
        .iter()
        .map(|p| (p.image.class_id, p.caption_class))
        .collect();
    assert!(combos.len() <= 90);
}

#[test]
fn options_contain_both_labels() {
    let (_, images) = small_pool(10, 40, 0.05, 11);
    let classes = ClassSet::numbered(10);
    let vocab = Vocab::new(10);
    let mut rng = Rng::new(12);
    let pairs =
        make_pairs(&images, &classes, PairMode::Inconsistent, Modality::Image, &mut rng).unwrap();
    for pair in &pairs {
        let prompt = build_prompt(pair, &vocab, 0, &mut rng);
        assert_eq!(prompt.options.len(), 5);
        assert!(prompt.options.contains(&pair.image.class_id));
        assert!(prompt.options.contains(&pair.caption_class));
        let distinct: std::collections::HashSet<_> = prompt.options.iter().collect();
        assert_eq!(distinct.len(), prompt.options.len());
    }
}

#[test]
fn options_shrink_with_small_class_sets() {
    let (_, images) = small_pool(3, 6, 0.05, 13);
    let classes = ClassSet::numbered(3);
    let vocab = Vocab::new(3);
    let mut rng = Rng::new(14);
    let pairs =
        make_pairs(&images, &classes, PairMode::Consistent, Modality::Image, &mut rng).unwrap();
    let prompt = build_prompt(&pairs[0], &vocab, 0, &mut rng);
    assert_eq!(prompt.options.len(), 3);
}

#[test]
fn prompt_structure_full() {
    let (_, images) = small_pool(6, 6, 0.05, 15);
    let classes = ClassSet::numbered(6);
    let vocab = Vocab::new(6);
    let mut rng = Rng::new(16);
    let pairs =
        make_pairs(&images, &classes, PairMode::Inconsistent, Modality::Image, &mut rng).unwrap();
    let pair = &pairs[0];
    let prompt = build_prompt(pair, &vocab, 2, &mut rng);
    let n_img = pair.image.grid.rows();
    assert!(prompt.tokens[..n_img].iter().all(|&t| t == Vocab::IMG));
    assert_eq!(prompt.tokens[n_img], Vocab::SEP);
    assert_eq!(prompt.tokens[n_img + 1], vocab.template_token(2));
    assert_eq!(prompt.tokens[n_img + 2], vocab.caption_token(pair.caption_class));
    assert_eq!(prompt.tokens[n_img + 3], Vocab::SEP);
    assert_eq!(prompt.tokens[n_img + 4], Vocab::QUERY_IMAGE);
    assert_eq!(*prompt.tokens.last().unwrap(), Vocab::ANSWER);
    assert_eq!(prompt.answer_position, prompt.tokens.len() - 1);
    assert!(prompt.patches.is_some());
}

#[test]
fn prompt_structure_unimodal() {
    let (_, images) = small_pool(6, 6, 0.05, 17);
    let classes = ClassSet::numbered(6);
    let vocab = Vocab::new(6);
    let mut rng = Rng::new(18);
    let pairs =
        make_pairs(&images, &classes, PairMode::UnimodalCaption, Modality::Image, &mut rng)
            .unwrap();
    let prompt = encode_prompt(&pairs[0], PromptKind::UnimodalCaption, &vocab, 0, &mut rng);
    assert!(prompt.patches.is_none());
    assert!(!prompt.tokens.contains(&Vocab::IMG));
    assert_eq!(prompt.tokens[prompt.tokens.len() - 7], Vocab::QUERY_CAPTION);

    let img_pairs =
        make_pairs(&images, &classes, PairMode::UnimodalImage, Modality::Image, &mut rng).unwrap();
    let prompt = encode_prompt(&img_pairs[0], PromptKind::UnimodalImage, &vocab, 0, &mut rng);
    assert!(prompt.patches.is_some());
    let caption_tokens = vocab.caption_token(0)..=vocab.caption_token(5);
    // Only option tokens may be caption-class tokens; the caption segment is gone.
    let n_img = img_pairs[0].image.grid.rows();
    assert_eq!(prompt.tokens[n_img], Vocab::SEP);
    assert_eq!(prompt.tokens[n_img + 1], Vocab::SEP);
    assert!(prompt.tokens[..n_img + 2]
        .iter()
        .all(|t| !caption_tokens.contains(t)));
}

#[test]
fn option_sets_reshuffle_across_seeds() {
    let (_, images) = small_pool(10, 1, 0.05, 19);
    let classes = ClassSet::numbered(10);
    let vocab = Vocab::new(10);
    let mut rng = Rng::new(20);
    let pair = &make_pairs(&images, &classes, PairMode::Inconsistent, Modality::Image, &mut rng)
        .unwrap()[0];
    let mut rng_a = Rng::new(100);
    let mut rng_b = Rng::new(200);
    let a = build_prompt(pair, &vocab, 0, &mut rng_a);
    let b = build_prompt(pair, &vocab, 0, &mut rng_b);
    // Both carry the two labels; the orders differ for these seeds.
    for p in [&a, &b] {
        assert!(p.options.contains(&pair.image.class_id));
        assert!(p.options.contains(&pair.caption_class));
    }
    assert_ne!(a.options, b.options);
}

#[test]
fn classify_prediction_categories() {
    let (_, images) = small_pool(10, 10, 0.05, 21);
    let classes = ClassSet::numbered(10);
    let mut rng = Rng::new(22);
    let mut pairs =
        make_pairs(&images, &classes, PairMode::Inconsistent, Modality::Caption, &mut rng)
            .unwrap();
    let pair = pairs.remove(0);
    let img = pair.image.class_id;
    let cap = pair.caption_class;
    let other = (0..10).find(|&c| c != img && c != cap).unwrap();
    let outside = (0..10).find(|&c| c != img && c != cap && c != other).unwrap();
    let options = vec![img, cap, other];
    // target = caption, predicted = image label → misled by the image.
    assert_eq!(
        classify_prediction(Some(img), &pair, &options),
        PredictionOutcome::Misled
    );
    assert_eq!(
        classify_prediction(Some(cap), &pair, &options),
        PredictionOutcome::Correct
    );
    assert_eq!(
        classify_prediction(Some(other), &pair, &options),
        PredictionOutcome::InOptionIncorrect
    );
    assert_eq!(
        classify_prediction(Some(outside), &pair, &options),
        PredictionOutcome::OutOfOption
    );
    assert_eq!(
        classify_prediction(None, &pair, &options),
        PredictionOutcome::OutOfOption
    );

    // target = image, predicted = image label → correct.
    let mut flipped = pair.clone();
    flipped.target = Modality::Image;
    assert_eq!(
        classify_prediction(Some(img), &flipped, &options),
        PredictionOutcome::Correct
    );
}

#[test]
fn breakdown_partitions_evaluation_set() {
    let (_, images) = small_pool(6, 60, 0.05, 23);
    let classes = ClassSet::numbered(6);
    let mut rng = Rng::new(24);
    let pairs =
        make_pairs(&images, &classes, PairMode::Inconsistent, Modality::Image, &mut rng).unwrap();
    let mut breakdown = BehavioralBreakdown::default();
    for (i, pair) in pairs.iter().enumerate() {
        let options = vec![pair.image.class_id, pair.caption_class];
        let predicted = if i % 3 == 0 { None } else { Some(i % 6) };
        breakdown.record(classify_prediction(predicted, pair, &options));
    }
    assert_eq!(breakdown.total(), pairs.len());
}

#[test]
fn collision_filter_single_token_scheme_removes_nothing() {
    let (_, images) = small_pool(6, 24, 0.05, 25);
    let classes = ClassSet::numbered(6);
    let vocab = Vocab::new(6);
    let mut rng = Rng::new(26);
    let pairs =
        make_pairs(&images, &classes, PairMode::Inconsistent, Modality::Image, &mut rng).unwrap();
    let n = pairs.len();
    let kept = filter_first_token_collisions(pairs, &TokenizerMap::single_token(&vocab));
    assert_eq!(kept.len(), n);
}

#[test]
fn collision_filter_shared_prefix_scheme() {
    // Classes "cat" and "catfish" answered as multi-token sequences sharing
    // their first token collide; pairs mixing them must be dropped.
    let (_, images) = small_pool(4, 40, 0.05, 27);
    let classes = ClassSet::numbered(4);
    let mut rng = Rng::new(28);
    let pairs =
        make_pairs(&images, &classes, PairMode::Inconsistent, Modality::Image, &mut rng).unwrap();
    let map = TokenizerMap {
        answer_sequences: vec![vec![50], vec![50, 51], vec![60], vec![61]],
    };
    let n_colliding = pairs
        .iter()
        .filter(|p| {
            (p.image.class_id == 0 && p.caption_class == 1)
                || (p.image.class_id == 1 && p.caption_class == 0)
        })
        .count();
    assert!(n_colliding > 0, "fixture should contain collisions");
    let n = pairs.len();
    let kept = filter_first_token_collisions(pairs, &map);
    assert_eq!(kept.len(), n - n_colliding);
}

#[test]
fn collision_filter_planted_count() {
    // 100 pairs, 10 planted collisions → 90 survivors.
    let (spec, images) = small_pool(6, 100, 0.05, 29);
    let classes = ClassSet::numbered(spec.n_classes);
    let mut rng = Rng::new(30);
    let mut pairs =
        make_pairs(&images, &classes, PairMode::Inconsistent, Modality::Image, &mut rng).unwrap();
    for pair in pairs.iter_mut().take(10) {
        pair.image.class_id = 0;
        pair.caption_class = 1;
    }
    for pair in pairs.iter_mut().skip(10) {
        if (pair.image.class_id == 0 && pair.caption_class == 1)
            || (pair.image.class_id == 1 && pair.caption_class == 0)
        {
            pair.caption_class = if pair.image.class_id == 2 { 3 } else { 2 };
        }
    }
    let map = TokenizerMap {
        answer_sequences: vec![vec![70], vec![70, 71], vec![72], vec![73], vec![74], vec![75]],
    };
    let kept = filter_first_token_collisions(pairs, &map);
    assert_eq!(kept.len(), 90);
}

#[test]
fn cifar_zero_record() {
    let bytes = vec![0u8; 3073];
    let images = parse_cifar10_binary(&bytes).unwrap();
    assert_eq!(images.len(), 1);
    assert_eq!(images[0].class_id, 0);
    assert!(images[0].grid.data().iter().all(|&v| v == 0.0));
    assert_eq!(images[0].grid.rows(), 16);
    assert_eq!(images[0].grid.cols(), 3);
}

#[test]
fn cifar_saturated_record() {
    let mut bytes = vec![255u8; 3073];
    bytes[0] = 7;
    let images = parse_cifar10_binary(&bytes).unwrap();
    assert_eq!(images[0].class_id, 7);
    assert!(images[0].grid.data().iter().all(|&v| (v - 1.0).abs() < 1e-7));
}

#[test]
fn cifar_matches_independent_offset_reader() {
    // Constructed batch with position-dependent pixels, checked against a
    // reader that walks raw byte offsets without any pooling machinery.
    let n_records = 3;
    let mut bytes = Vec::with_capacity(n_records * 3073);
    for rec in 0..n_records {
        bytes.push((rec * 3) as u8);
        for i in 0..3072usize {
            bytes.push(((i * 7 + rec * 13) % 256) as u8);
        }
    }
    let images = parse_cifar10_binary(&bytes).unwrap();
    assert_eq!(images.len(), n_records);

    for (rec, img) in images.iter().enumerate() {
        let base = rec * 3073;
        assert_eq!(img.class_id, bytes[base] as usize);
        // Oracle: patch (gy, gx), channel ch, averaged straight from offsets.
        for gy in 0..4 {
            for gx in 0..4 {
                for ch in 0..3 {
                    let mut acc = 0.0f64;
                    for py in 0..8 {
                        for px in 0..8 {
                            let y = gy * 8 + py;
                            let x = gx * 8 + px;
                            let off = base + 1 + ch * 1024 + y * 32 + x;
                            acc += bytes[off] as f64 / 255.0;
                        }
                    }
                    let expected = (acc / 64.0) as f32;
                    let got = img.grid.get(gy * 4 + gx, ch);
                    assert!((got - expected).abs() < 1e-7, "rec {rec} patch ({gy},{gx}) ch {ch}");
                }
            }
        }
    }
}

#[test]
fn cifar_truncated_record_reports_offset() {
    let bytes = vec![0u8; 3073 + 100];
    match parse_cifar10_binary(&bytes) {
        Err(DataError::Format { offset, .. }) => assert_eq!(offset, 3073),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn cifar_bad_label_rejected() {
    let mut bytes = vec![0u8; 3073];
    bytes[0] = 10;
    assert!(matches!(
        parse_cifar10_binary(&bytes),
        Err(DataError::Format { offset: 0, .. })
    ));
}

#[test]
fn dataset_file_round_trip() {
    let (spec, images) = small_pool(6, 12, 0.05, 31);
    let mut buf = Vec::new();
    save_dataset(&mut buf, spec.n_classes, spec.grid_size, spec.patch_dim, &images).unwrap();
    let (n_classes, grid, patch_dim, loaded) = load_dataset(&mut buf.as_slice()).unwrap();
    assert_eq!((n_classes, grid, patch_dim), (6, 4, 8));
    assert_eq!(loaded.len(), images.len());
    for (a, b) in loaded.iter().zip(&images) {
        assert_eq!(a.class_id, b.class_id);
        assert_eq!(a.grid.data(), b.grid.data());
    }
}

#[test]
fn synthetic_classes_balanced_and_marked() {
    let (spec, images) = small_pool(6, 60, 0.05, 33);
    for k in 0..6 {
        assert_eq!(images.iter().filter(|i| i.class_id == k).count(), 10);
    }
    // Signal channel stands out in exactly one patch of the class quadrant.
    for img in &images {
        let channel = img.class_id % spec.patch_dim;
        let strong: Vec<usize> = (0..img.grid.rows())
            .filter(|&p| img.grid.get(p, channel) > 0.5)
            .collect();
        assert_eq!(strong.len(), 1, "class {}", img.class_id);
    }
}

proptest! {
    #[test]
    fn inconsistent_pairs_always_conflict(seed in 0u64..500) {
        let classes = ClassSet::numbered(6);
        let (_, images) = small_pool(6, 12, 0.05, seed);
        let mut rng = Rng::new(seed ^ 0xabcd);
        let pairs = make_pairs(&images, &classes, PairMode::Inconsistent, Modality::Image, &mut rng).unwrap();
        for p in &pairs {
            prop_assert_ne!(p.caption_class, p.image.class_id);
            prop_assert!(!p.consistent);
        }
    }

    #[test]
    fn option_invariant_holds(seed in 0u64..500) {
        let classes = ClassSet::numbered(7);
        let (_, images) = small_pool(7, 4, 0.05, seed);
        let vocab = Vocab::new(7);
        let mut rng = Rng::new(seed ^ 0x1234);
        let pairs = make_pairs(&images, &classes, PairMode::Inconsistent, Modality::Caption, &mut rng).unwrap();
        for pair in &pairs {
            let prompt = build_prompt(pair, &vocab, 0, &mut rng);
            prop_assert_eq!(prompt.options.len(), 5);
            prop_assert!(prompt.options.contains(&pair.image.class_id));
            prop_assert!(prompt.options.contains(&pair.caption_class));
        }
    }
}
