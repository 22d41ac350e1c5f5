mod common;

use std::collections::BTreeSet;
use std::path::PathBuf;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sedkit_core::corpus::{parse_annotation_tags, split_by_speaker, ClipRecord, LabelVector, Split, Tag};
use sedkit_core::frontend::{
    compute_fbank, spec_augment_with_masks, AugmentPolicy, FeatureMatrix, MaskAxis, Waveform, SAMPLE_RATE,
};
use sedkit_core::metrics::{accumulate_confusion, f1_scores, score, Counts};
use sedkit_core::network::{Model, ModelConfig, Session};
use sedkit_core::numerics::{adam_step, conv_out_len, Activation, AdamConfig, AdamState, Array, Graph, ParamStore};
use sedkit_core::trainer::{bce_with_logits, focal_loss, LossBatch};

fn label_strategy() -> impl Strategy<Value = LabelVector> {
    prop::array::uniform5(any::<bool>()).prop_map(LabelVector)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::random_array(&mut rng, &[rows, cols], 20.0);
        let mut g = Graph::<f64>::new();
        let v = g.leaf(x.clone(), false);
        let s = g.activation(v, Activation::Softmax).unwrap();
        for r in 0..rows {
            let sum: f64 = g.value(s).row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
        let sg = g.activation(v, Activation::Sigmoid).unwrap();
        prop_assert!(g.value(sg).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn conv_length_matches_sliding_window(len in 1usize..60, k in 1usize..8, stride in 1usize..4, pad in 0usize..4) {
        prop_assume!(k <= len + 2 * pad);
        let mut windows = 0;
        let mut start = 0;
        while start + k <= len + 2 * pad {
            windows += 1;
            start += stride;
        }
        prop_assert_eq!(conv_out_len(len, k, stride, pad), windows);
        // The depthwise op produces exactly that many rows.
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Array::zeros(&[len, 2]), false);
        let w = g.leaf(Array::full(&[2, k], 1.0), false);
        let y = g.convolution(x, w, None, sedkit_core::numerics::ConvMode::Depthwise1d, stride, pad).unwrap();
        prop_assert_eq!(g.shape(y)[0], windows);
    }

    #[test]
    fn diamond_graph_sums_both_paths(a in -2.0f64..2.0, b in -2.0f64..2.0) {
        // f(x) = x*x + 3x: both uses of x feed the gradient.
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Array::from_f64(&[1], &[a]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0).unwrap();
        let y = g.add(sq, lin).unwrap();
        let c = g.constant(Array::from_f64(&[1], &[b]).unwrap());
        let z = g.mul(y, c).unwrap();
        let loss = g.sum(z).unwrap();
        let grad = g.backward(loss).unwrap().get(x).unwrap().data()[0];
        prop_assert!((grad - b * (2.0 * a + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point(seed in any::<u64>(), steps in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::<f32>::new();
        params.insert("w", common::random_array(&mut rng, &[3, 4], 2.0).cast());
        params.insert("b", common::random_array(&mut rng, &[4], 2.0).cast());
        let before = params.clone();
        let mut state = AdamState::new(&params, AdamConfig { lr: 0.1, ..AdamConfig::default() });
        for _ in 0..steps {
            let zeros = params.zeros_like();
            adam_step(&mut params, &zeros, &mut state).unwrap();
        }
        for i in 0..params.len() {
            prop_assert_eq!(params.value(i).data(), before.value(i).data());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fbank_frame_count_and_determinism(len in 400usize..12_000, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<f32> = common::random_array(&mut rng, &[len], 0.1).data().iter().map(|&v| v as f32).collect();
        let wave = Waveform::new(samples, SAMPLE_RATE);
        let f = compute_fbank(&wave).unwrap();
        prop_assert_eq!(f.num_frames(), 1 + (len - 400) / 160);
        let again = compute_fbank(&wave).unwrap();
        prop_assert_eq!(f.data(), again.data());
    }

    #[test]
    fn doubling_amplitude_adds_two_ln2(len in 400usize..4000, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<f32> = common::random_array(&mut rng, &[len], 0.3).data().iter().map(|&v| v as f32).collect();
        let louder: Vec<f32> = samples.iter().map(|s| 2.0 * s).collect();
        let a = compute_fbank(&Waveform::new(samples, SAMPLE_RATE)).unwrap();
        let b = compute_fbank(&Waveform::new(louder, SAMPLE_RATE)).unwrap();
        let expected = 2.0 * std::f64::consts::LN_2;
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((f64::from(y - x) - expected).abs() < 1e-3, "{x} -> {y}");
        }
    }

    #[test]
    fn spec_augment_keeps_shape_and_unmasked_cells(t in 10usize..120, bins in 8usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = common::random_array(&mut rng, &[t * bins], 5.0).data().iter().map(|&v| v as f32).collect();
        let f = FeatureMatrix::new(data, t, bins).unwrap();
        let (out, masks) = spec_augment_with_masks(&f, &AugmentPolicy::default(), &mut rng);
        prop_assert_eq!((out.num_frames(), out.num_bins()), (t, bins));
        let masked = |ti: usize, bi: usize| masks.iter().any(|m| {
            let pos = if m.axis == MaskAxis::Time { ti } else { bi };
            pos >= m.start && pos < m.start + m.width
        });
        for ti in 0..t {
            for bi in 0..bins {
                if !masked(ti, bi) {
                    prop_assert_eq!(out.get(ti, bi).to_bits(), f.get(ti, bi).to_bits());
                }
            }
        }
    }
}

fn render_transcript(labels: &LabelVector, words: &[String], positions: &[usize]) -> String {
    let mut tokens: Vec<String> = words.to_vec();
    let markers: Vec<&str> = Tag::ALL.iter().filter(|t| labels.get(**t)).map(|t| t.marker()).collect();
    for (m, &p) in markers.iter().zip(positions) {
        let at = p % (tokens.len() + 1);
        tokens.insert(at, m.to_string());
    }
    tokens.join(" ")
}

proptest! {
    #[test]
    fn tag_parsing_is_idempotent_and_position_free(
        labels in label_strategy(),
        words in prop::collection::vec("[a-z]{1,6}", 0..8),
        pos_a in prop::collection::vec(any::<usize>(), 5),
        pos_b in prop::collection::vec(any::<usize>(), 5),
    ) {
        let a = render_transcript(&labels, &words, &pos_a);
        let b = render_transcript(&labels, &words, &pos_b);
        let parsed = parse_annotation_tags(&a);
        prop_assert_eq!(parsed, labels);
        prop_assert_eq!(parse_annotation_tags(&b), parsed);
        let reparsed = parse_annotation_tags(&render_transcript(&parsed, &words, &pos_b));
        prop_assert_eq!(reparsed, parsed);
    }

    #[test]
    fn speaker_split_is_disjoint_and_complete(
        clips_per_speaker in prop::collection::vec(1usize..6, 3..40),
        seed in any::<u64>(),
    ) {
        let mut records = Vec::new();
        for (s, &n) in clips_per_speaker.iter().enumerate() {
            for c in 0..n {
                records.push(ClipRecord {
                    id: format!("s{s}c{c}"),
                    audio_path: PathBuf::from("x.wav"),
                    speaker_id: format!("spk{s}"),
                    transcript: None,
                    labels: LabelVector::default(),
                    split: None,
                });
            }
        }
        let split = split_by_speaker(&records, [0.614, 0.10, 0.286], seed).unwrap();
        let sets: Vec<BTreeSet<&str>> = [Split::Train, Split::Dev, Split::Test].iter().map(|&s| split.speakers(s)).collect();
        prop_assert!(sets[0].is_disjoint(&sets[1]));
        prop_assert!(sets[0].is_disjoint(&sets[2]));
        prop_assert!(sets[1].is_disjoint(&sets[2]));
        let total: usize = [Split::Train, Split::Dev, Split::Test].iter().map(|&s| split.get(s).len()).sum();
        prop_assert_eq!(total, records.len());
        let again = split_by_speaker(&records, [0.614, 0.10, 0.286], seed).unwrap();
        prop_assert_eq!(again.get(Split::Dev), split.get(Split::Dev));
    }
}

fn loss_batch() -> impl Strategy<Value = LossBatch> {
    (1usize..6, 1usize..4).prop_flat_map(|(n, width)| {
        (
            prop::collection::vec(prop::bool::ANY, n * width),
            prop::collection::vec(-10.0f64..10.0, n * width),
            prop::collection::vec(0.5f64..20.0, width),
        )
            .prop_map(move |(y, p, w)| {
                let y = y.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
                LossBatch::new(n, width, y, p, w).unwrap()
            })
    })
}

fn bce_oracle(b: &LossBatch) -> f64 {
    let mut total = 0.0;
    for i in 0..b.n {
        for j in 0..b.width {
            let k = i * b.width + j;
            let s = sigmoid(b.logits[k]);
            let y = b.targets[k];
            total -= b.pos_weight[j] * y * s.ln() + (1.0 - y) * (1.0 - s).ln();
        }
    }
    total / (b.n * b.width) as f64
}

fn permute_rows(b: &LossBatch, order: &[usize]) -> LossBatch {
    let mut targets = Vec::new();
    let mut logits = Vec::new();
    for &i in order {
        targets.extend_from_slice(&b.targets[i * b.width..(i + 1) * b.width]);
        logits.extend_from_slice(&b.logits[i * b.width..(i + 1) * b.width]);
    }
    LossBatch::new(b.n, b.width, targets, logits, b.pos_weight.clone()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn bce_matches_scalar_oracle(b in loss_batch()) {
        let got = bce_with_logits(&b).unwrap();
        prop_assert!((got - bce_oracle(&b)).abs() < 1e-9, "{got} vs {}", bce_oracle(&b));
    }
}

proptest! {
    #[test]
    fn losses_ignore_batch_order(b in loss_batch(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..b.n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let p = permute_rows(&b, &order);
        prop_assert!((bce_with_logits(&b).unwrap() - bce_with_logits(&p).unwrap()).abs() < 1e-12);
        let f = |x: &LossBatch| focal_loss(x, 2.0, Some(0.25)).unwrap();
        prop_assert!((f(&b) - f(&p)).abs() < 1e-12);
    }

    #[test]
    fn unit_weight_losses_coincide(b in loss_batch()) {
        let plain = LossBatch::new(b.n, b.width, b.targets.clone(), b.logits.clone(), vec![1.0; b.width]).unwrap();
        let unweighted = LossBatch::plain(b.targets.clone(), b.logits.clone()).unwrap();
        let bce = bce_with_logits(&plain).unwrap();
        prop_assert!((bce - bce_with_logits(&unweighted).unwrap()).abs() < 1e-12);
        prop_assert!((bce - focal_loss(&plain, 0.0, None).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn f1_is_harmonic_mean_and_bounded(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 0u64..50) {
        let s = score(&Counts { tp, fp, fn_, tn });
        prop_assert!((0.0..=1.0).contains(&s.f1));
        if tp + fp > 0 && tp + fn_ > 0 && s.precision + s.recall > 0.0 {
            let p = tp as f64 / (tp + fp) as f64;
            let r = tp as f64 / (tp + fn_) as f64;
            prop_assert!((s.f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
        }
    }

    #[test]
    fn f1_ignores_clip_order(
        pairs in prop::collection::vec((label_strategy(), label_strategy()), 1..40),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let (preds, refs): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (sp, sr): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
        let a = f1_scores(&accumulate_confusion(&Tag::ALL, &preds, &refs).unwrap());
        let b = f1_scores(&accumulate_confusion(&Tag::ALL, &sp, &sr).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn swapping_hypothesis_and_reference_swaps_fp_and_fn(
        pairs in prop::collection::vec((label_strategy(), label_strategy()), 1..40),
    ) {
        let (preds, refs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let a = accumulate_confusion(&Tag::ALL, &preds, &refs).unwrap();
        let b = accumulate_confusion(&Tag::ALL, &refs, &preds).unwrap();
        for tag in Tag::ALL {
            let (x, y) = (a.get(tag).unwrap(), b.get(tag).unwrap());
            prop_assert_eq!((x.tp, x.fp, x.fn_, x.tn), (y.tp, y.fn_, y.fp, y.tn));
        }
    }
}

fn tiny_config(tasks: Vec<Tag>) -> ModelConfig {
    ModelConfig {
        num_blocks: 1,
        d_model: 16,
        attention_heads: 2,
        ff_expansion: 2,
        conv_kernel: 3,
        subsample_channels: 2,
        lstm_layers: 1,
        lstm_hidden: 8,
        proj_dim: 8,
        num_mel_bins: 16,
        task_subset: tasks,
        ..ModelConfig::default()
    }
}

fn features(seed: u64, t: usize, bins: usize) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = common::random_array(&mut rng, &[t * bins], 3.0).data().iter().map(|&v| v as f32).collect();
    FeatureMatrix::new(data, t, bins).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn head_count_matches_task_subset(mask in 1u8..32, seed in any::<u64>()) {
        let tasks: Vec<Tag> = Tag::ALL.iter().copied().filter(|t| mask & (1 << t.index()) != 0).collect();
        let model = Model::<f32>::new(tiny_config(tasks.clone()), seed).unwrap();
        let out = model.forward(&features(seed, 20, 16), false, 0).unwrap();
        prop_assert_eq!(out.num_tasks(), tasks.len());
        prop_assert_eq!(out.tasks, tasks);
    }

    #[test]
    fn eval_forward_is_bitwise_stable(seed in any::<u64>(), t in 7usize..40) {
        let model = Model::<f32>::new(tiny_config(Tag::ALL.to_vec()), seed).unwrap();
        let f = features(seed ^ 1, t, 16);
        let a = model.forward(&f, false, 0).unwrap();
        let b = model.forward(&f, false, 99).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a.values), bits(&b.values));
    }

    #[test]
    fn pooled_logits_ignore_frame_order_without_sequence_layers(seed in any::<u64>(), t in 2usize..12) {
        use rand::seq::SliceRandom;
        let cfg = ModelConfig { num_blocks: 0, lstm_layers: 0, ..tiny_config(Tag::ALL.to_vec()) };
        let model = Model::<f64>::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::random_array(&mut rng, &[t, 16], 2.0);
        let mut order: Vec<usize> = (0..t).collect();
        order.shuffle(&mut rng);
        let permuted: Vec<f64> = order.iter().flat_map(|&r| x.row(r).to_vec()).collect();
        let run = |a: Array<f64>| {
            let mut s = Session::new(&model, false, 0);
            let v = s.input(a);
            let h = s.encode_sequence(v).unwrap();
            let l = s.pool_and_classify(h).unwrap();
            s.graph().value(l).to_f64_vec()
        };
        let a = run(x.clone());
        let b = run(Array::from_f64(&[t, 16], &permuted).unwrap());
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}
