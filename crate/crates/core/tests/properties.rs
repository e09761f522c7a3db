use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdistill::checkpoint::{Checkpoint, Stage};
use sdistill::corpus::{frame_labels, generate_corpus, linear_probe_accuracy, make_batches, mean_gap, DomainSpec, SplitCounts};
use sdistill::ctc::{ctc_loss, min_frames};
use sdistill::distill::{distill_step, stable_distill_loss, DistillConfig, DistillNorm};
use sdistill::evaluate::{wer, weight_distance_params};
use sdistill::model::{encode, init_params, ModelConfig};
use sdistill::pipeline::{AdamState, TrainHyper};
use sdistill::pretext::{contrastive_loss_with_negatives, reconstruction_pretext_loss, sample_mask, sample_negatives, MaskSpec, PretextConfig};
use sdistill::{Graph, Tensor};

fn tensor(rows: usize, cols: usize, vals: &[f64]) -> Tensor<f64> {
    Tensor::from_vec([rows, cols], vals[..rows * cols].to_vec())
}

fn small_model() -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        max_time: 64,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mean_is_sum_over_count(rows in 1usize..6, cols in 1usize..6, vals in prop::collection::vec(-1e3f64..1e3, 36)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(tensor(rows, cols, &vals));
        let s = g.sum(x);
        let m = g.mean(x);
        prop_assert_eq!(g.value(m).item(), g.value(s).item() / (rows * cols) as f64);
    }

    #[test]
    fn graph_evaluation_is_pure(seed in any::<u64>()) {
        let p = init_params(&small_model(), seed).unwrap();
        let frames = Tensor::from_vec([10, 16], (0..160).map(|i| ((i as f64 * 0.37 + seed as f64).sin()) as f32).collect());
        let a = encode(&p, &frames, None).unwrap();
        let b = encode(&p, &frames, None).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn attention_only_encoder_commutes_with_time_permutation(seed in any::<u64>(), len in 2usize..12) {
        let cfg = ModelConfig { use_positions: false, ffn_dim: 0, ..small_model() };
        let p = init_params(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<f32> = (0..len * 16).map(|i| ((i as f64 + seed as f64 * 1e-3).cos()) as f32).collect();
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<f32> = perm.iter().flat_map(|&t| frames[t * 16..(t + 1) * 16].to_vec()).collect();
        let out = encode(&p, &Tensor::from_vec([len, 16], frames), None).unwrap();
        let out_p = encode(&p, &Tensor::from_vec([len, 16], permuted), None).unwrap();
        let h = cfg.hidden_dim;
        for (i, &t) in perm.iter().enumerate() {
            for j in 0..h {
                let (a, b) = (out_p.data()[i * h + j], out.data()[t * h + j]);
                prop_assert!((a - b).abs() < 1e-4, "row {} col {}: {} vs {}", i, j, a, b);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), step in any::<u64>()) {
        let mut p = init_params(&small_model(), seed).unwrap();
        p.reset_ctc_head(seed ^ 1);
        let c = Checkpoint::new(Stage::Finetuned, step, p);
        let back = Checkpoint::decode(&c.encode()).unwrap();
        prop_assert_eq!(back.encode(), c.encode());
        prop_assert_eq!(back.params, c.params);
    }

    #[test]
    fn clones_do_not_alias(seed in any::<u64>()) {
        let p = init_params(&small_model(), seed).unwrap();
        let mut q = p.clone();
        let before = p.clone();
        for (_, t) in q.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x += 1.0);
        }
        prop_assert_eq!(p, before);
    }

    #[test]
    fn masks_are_reproducible_sorted_and_in_range(len in 3usize..200, p in 0.01f64..0.9, span in 1usize..4, seed in any::<u64>()) {
        let cfg = PretextConfig { mask_prob: p, span, ..PretextConfig::default() };
        let a = sample_mask(len, &cfg, seed).unwrap();
        let b = sample_mask(len, &cfg, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(!a.is_empty());
        prop_assert!(a.indices().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(a.indices().iter().all(|&i| i < len));
    }

    #[test]
    fn losses_ignore_unmasked_targets(seed in any::<u64>(), vals in prop::collection::vec(-1f64..1.0, 96), noise in prop::collection::vec(-5f64..5.0, 96)) {
        let (t, h) = (12, 8);
        let cfg = PretextConfig { mask_prob: 0.3, num_negatives: 4, ..PretextConfig::default() };
        let mask = sample_mask(t, &cfg, seed).unwrap();
        let negs = sample_negatives(&mask, 4, seed).unwrap();
        let repr = tensor(t, h, &vals);
        let targets = tensor(t, h, &vals.iter().rev().cloned().collect::<Vec<_>>());
        let mut changed = targets.clone();
        // A single masked frame borrows its negatives from unmasked frames.
        let used = |row: &usize| mask.indices().contains(row) || negs.iter().flatten().any(|n| n == row);
        for row in 0..t {
            if !used(&row) {
                for j in 0..h {
                    changed.data_mut()[row * h + j] = noise[row * h + j];
                }
            }
        }
        let a = contrastive_loss_with_negatives(&repr, &targets, &mask, &negs, 0.1).unwrap();
        let b = contrastive_loss_with_negatives(&repr, &changed, &mask, &negs, 0.1).unwrap();
        prop_assert_eq!(a, b);
        let mut changed = targets.clone();
        for row in 0..t {
            if !mask.indices().contains(&row) {
                changed.data_mut()[row * h..(row + 1) * h].copy_from_slice(&noise[row * h..(row + 1) * h]);
            }
        }
        let a = reconstruction_pretext_loss(&repr, &targets, &mask).unwrap();
        let b = reconstruction_pretext_loss(&repr, &changed, &mask).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn contrastive_loss_falls_as_the_true_target_aligns(vals in prop::collection::vec(-1f64..1.0, 64), w in 0.05f64..0.95) {
        // Row 0 is scored against distractor rows 1..6; only its own target
        // moves toward the prediction.
        let (t, h) = (8, 8);
        let mask = MaskSpec::from_indices(t, vec![0]).unwrap();
        let negs = vec![vec![1, 2, 3, 4, 5]];
        let repr = tensor(t, h, &vals);
        let base = tensor(t, h, &vals.iter().map(|x| x * 0.5 - 0.1).rev().collect::<Vec<_>>());
        let mut closer = base.clone();
        for j in 0..h {
            closer.data_mut()[j] = (1.0 - w) * base.data()[j] + w * repr.data()[j];
        }
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        prop_assume!(cos(&repr.data()[..h], &closer.data()[..h]) > cos(&repr.data()[..h], &base.data()[..h]) + 1e-9);
        let a = contrastive_loss_with_negatives(&repr, &base, &mask, &negs, 0.1).unwrap();
        let b = contrastive_loss_with_negatives(&repr, &closer, &mask, &negs, 0.1).unwrap();
        prop_assert!(b < a, "{} !< {}", b, a);
    }

    #[test]
    fn extra_frames_keep_labels_feasible(labels in prop::collection::vec(1u32..4, 0..4), extra in 0usize..4, seed in any::<u64>()) {
        let vocab = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = min_frames(&labels).max(1);
        for frames in [t, t + extra] {
            let lp: Vec<f64> = (0..frames * vocab).map(|_| -rand::Rng::gen_range(&mut rng, 0.1f64..3.0)).collect();
            let out = ctc_loss(&Tensor::from_vec([frames, vocab], lp), &labels).unwrap();
            prop_assert!(out.feasible);
        }
    }

    #[test]
    fn wer_is_zero_exactly_for_equal_sequences(r in prop::collection::vec(1u32..6, 1..10), h in prop::collection::vec(1u32..6, 0..10)) {
        let rep = wer(&[r.clone()], &[h.clone()]).unwrap();
        prop_assert_eq!(rep.wer() == 0.0, r == h);
        prop_assert_eq!(wer(&[r.clone()], &[r]).unwrap().wer(), 0.0);
    }

    #[test]
    fn weight_distance_ignores_tensor_order(a in any::<u64>(), b in any::<u64>(), shuffle in any::<u64>()) {
        let pa = init_params(&small_model(), a).unwrap();
        let pb = init_params(&small_model(), b).unwrap();
        let d = weight_distance_params(&pa, &pb).unwrap();
        let mut per = d.per_tensor.clone();
        per.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let total = per.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
        prop_assert!((total - d.total).abs() <= 1e-12 * d.total.max(1.0));
        prop_assert_eq!(weight_distance_params(&pb, &pa).unwrap().total, d.total);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn corpus_generation_and_batching_are_deterministic(seed in any::<u64>(), bs in 1usize..6, epoch in 0u64..4) {
        let spec = DomainSpec::default();
        let a = generate_corpus(&spec, SplitCounts::new(6, 2, 2), seed).unwrap();
        let b = generate_corpus(&spec, SplitCounts::new(6, 2, 2), seed).unwrap();
        prop_assert_eq!(&a, &b);
        let ids = |c: &sdistill::corpus::Corpus| -> Vec<Vec<usize>> {
            make_batches(&c.train, bs, seed, epoch).unwrap().into_iter().map(|b| b.indices).collect()
        };
        prop_assert_eq!(ids(&a), ids(&b));
    }

    #[test]
    fn distillation_never_touches_the_teacher_and_accounts_exactly(seed in any::<u64>(), alpha in 0.0f64..1.0, l2 in any::<bool>()) {
        let cfg = small_model();
        let student0 = init_params(&cfg, seed).unwrap();
        let teacher = init_params(&cfg, seed ^ 0xabc).unwrap();
        let frozen = teacher.clone();
        let corpus = generate_corpus(&DomainSpec { len_max: 8, ..DomainSpec::default() }, SplitCounts::new(4, 1, 1), seed).unwrap();
        let dcfg = DistillConfig {
            alpha,
            norm: if l2 { DistillNorm::L2 } else { DistillNorm::Mse },
            ..DistillConfig::default()
        };
        let mut student = student0.clone();
        let mut state = AdamState::new(&student);
        let hyper = TrainHyper::continued();
        for (i, b) in make_batches(&corpus.train, 2, seed, 0).unwrap().iter().enumerate() {
            let r = distill_step(&mut student, &teacher, b, &mut state, &hyper, &dcfg, i as u64).unwrap();
            prop_assert!((r.total - (r.mse + alpha * r.pretext)).abs() < 1e-9);
            let (l, r2) = stable_distill_loss(&student, &teacher, b, i as u64, &dcfg).unwrap();
            prop_assert_eq!(l, r2.total);
        }
        prop_assert_eq!(&teacher, &frozen);
        prop_assert!(student != student0);
    }
}

#[test]
fn masked_fraction_matches_expectation() {
    let len = 400;
    for (p, span) in [(0.25, 3), (0.1, 1), (0.05, 4)] {
        let cfg = PretextConfig {
            mask_prob: p,
            span,
            ..PretextConfig::default()
        };
        let trials: u64 = 400;
        let masked: usize = (0..trials).map(|s| sample_mask(len, &cfg, s).unwrap().len()).sum();
        let got = masked as f64 / (trials as usize * len) as f64;
        // Interior frames are covered unless all `span` candidate starts miss;
        // the first `span - 1` frames have fewer candidates.
        let interior = 1.0 - (1.0f64 - p).powi(span as i32);
        let edge: f64 = (0..span - 1).map(|t| 1.0 - (1.0f64 - p).powi(t as i32 + 1)).sum();
        let want = (interior * (len - (span - 1)) as f64 + edge) / len as f64;
        assert!((got - want).abs() < 0.01, "p {p} span {span}: {got} vs {want}");
    }
}

#[test]
fn shift_dial_is_monotone() {
    let src = generate_corpus(&DomainSpec::default(), SplitCounts::new(60, 1, 1), 3).unwrap();
    let gaps: Vec<f64> = [0.5, 1.0, 2.0]
        .iter()
        .map(|&shift| {
            let spec = DomainSpec {
                domain_id: 1,
                shift,
                ..DomainSpec::default()
            };
            mean_gap(&src, &generate_corpus(&spec, SplitCounts::new(60, 1, 1), 4).unwrap(), 1000)
        })
        .collect();
    assert!(gaps[0] > 0.0 && gaps[0] < gaps[1] && gaps[1] < gaps[2], "{gaps:?}");
}

#[test]
fn frames_are_linearly_separable_at_low_noise() {
    let spec = DomainSpec {
        noise_std: 0.05,
        ..DomainSpec::default()
    };
    let model = spec.materialize().unwrap();
    let acc = linear_probe_accuracy(&frame_labels(&model, 2000, 1), &frame_labels(&model, 1000, 2), spec.num_phonemes);
    assert!(acc > 0.95, "{acc}");
}
