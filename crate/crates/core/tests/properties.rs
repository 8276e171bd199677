use std::collections::BTreeMap;

use moretool::data::{augment_dataset, mean_pool, segment_means, Dataset, FrameExample};
use moretool::ensemble::{fuse, leave_one_out_weights, segmented_inference, Metric, SEGMENT_WEIGHTS};
use moretool::metrics::oracle::{oracle_gap, oracle_map, oracle_perr};
use moretool::metrics::{gap_at_k, mean_ap, perr, read_predictions, write_predictions, PredictionSet};
use moretool::models::{checkpoint, Input, LCSpec, Model, ModelSpec, Params, Pooling};
use moretool::tensor::{Graph, Mode, Tensor};
use moretool::training::{adagrad_step, clip_gradients, global_norm, lr_at, Grads, OptState};
use proptest::prelude::*;

/// Scores on a coarse grid so that ties occur often.
fn grid_scores(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0u32..=16).prop_map(|i| i as f64 / 16.0), len)
}

prop_compose! {
    fn prediction_set(max_videos: usize, max_classes: usize)
        (n in 1..=max_videos, c in 1..=max_classes)
        (scores in grid_scores(n * c),
         labels in prop::collection::vec(prop::collection::btree_set(0..c, 0..=c.min(4)), n),
         c in Just(c))
        -> PredictionSet
    {
        let n = labels.len();
        let ids = (0..n).map(|i| format!("v{i}")).collect();
        let labels = labels.into_iter().map(|s| s.into_iter().collect()).collect();
        PredictionSet::new(ids, c, scores, labels).unwrap()
    }
}

fn has_labels(p: &PredictionSet) -> bool {
    p.labels().iter().any(|l| !l.is_empty())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_match_oracles_and_lie_in_unit_interval(p in prediction_set(12, 8), k in 1usize..10) {
        prop_assume!(has_labels(&p));
        let g = gap_at_k(&p, k).unwrap();
        let (m, _) = mean_ap(&p).unwrap();
        let e = perr(&p);
        prop_assert!((g - oracle_gap(&p, k)).abs() <= 1e-12);
        prop_assert!((m - oracle_map(&p)).abs() <= 1e-12);
        prop_assert!((e - oracle_perr(&p)).abs() <= 1e-12);
        for x in [g, m, e] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn metrics_depend_only_on_ranks(p in prediction_set(10, 6), k in 1usize..8) {
        prop_assume!(has_labels(&p));
        // Strictly increasing on the grid, and far from collapsing neighbours.
        let q = p.with_scores(p.scores().iter().map(|s| 5.0 * (1.0 + s).ln() - 2.0).collect()).unwrap();
        prop_assert_eq!(gap_at_k(&p, k).unwrap(), gap_at_k(&q, k).unwrap());
        prop_assert_eq!(mean_ap(&p).unwrap().0, mean_ap(&q).unwrap().0);
        prop_assert_eq!(perr(&p), perr(&q));
    }

    #[test]
    fn perfect_predictor_scores_one(p in prediction_set(10, 6)) {
        prop_assume!(has_labels(&p));
        let c = p.num_classes();
        let mut s = vec![0.0; p.len() * c];
        for (v, ls) in p.labels().iter().enumerate() {
            for &l in ls {
                s[v * c + l] = 1.0;
            }
        }
        let q = p.with_scores(s).unwrap();
        prop_assert_eq!(gap_at_k(&q, 4).unwrap(), 1.0);
        prop_assert_eq!(mean_ap(&q).unwrap().0, 1.0);
        prop_assert_eq!(perr(&q), 1.0);
    }

    #[test]
    fn single_video_gap_is_nondecreasing_in_k(p in prediction_set(1, 12)) {
        prop_assume!(has_labels(&p));
        let mut last = 0.0;
        for k in 1..=p.num_classes() {
            let g = gap_at_k(&p, k).unwrap();
            prop_assert!(g >= last);
            last = g;
        }
    }

    #[test]
    fn csv_round_trip_is_lossless(p in prediction_set(6, 5)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let truth: Vec<(String, Vec<usize>)> = p.ids().iter().cloned().zip(p.labels().iter().cloned()).collect();
        write_predictions(&path, &p, 0).unwrap();
        let back = read_predictions(&path, p.num_classes()).unwrap().align(&truth).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn fuse_is_idempotent_and_exact_on_one_hot(p in prediction_set(6, 5), q in grid_scores(30), w in 0.0f64..1.0) {
        prop_assume!(p.len() * p.num_classes() <= 30);
        let other = p.with_scores(q[..p.scores().len()].to_vec()).unwrap();
        prop_assert_eq!(&fuse(&[&p, &p, &p], &[w / 2.0, w / 2.0, 1.0 - w]).unwrap(), &p);
        prop_assert_eq!(&fuse(&[&p, &other], &[0.0, 1.0]).unwrap(), &other);
        prop_assert_eq!(&fuse(&[&p, &other], &[1.0, 0.0]).unwrap(), &p);
        let ab = fuse(&[&p, &other], &[w, 1.0 - w]).unwrap();
        let ba = fuse(&[&other, &p], &[1.0 - w, w]).unwrap();
        prop_assert_eq!(ab.scores(), ba.scores());
    }

    #[test]
    fn clipping_never_increases_the_norm(
        g in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 1..6), 1..4),
        clip in 0.01f64..10.0,
    ) {
        let mut grads: Grads = g.into_iter().enumerate().map(|(i, v)| (format!("p{i}"), v)).collect();
        let before = global_norm(&grads);
        let reported = clip_gradients(&mut grads, clip);
        let after = global_norm(&grads);
        prop_assert_eq!(reported, before);
        prop_assert!(after <= before);
        prop_assert!(after <= clip * (1.0 + 1e-12));
    }

    #[test]
    fn learning_rate_never_increases(
        a in 0u64..10_000_000, b in 0u64..10_000_000,
        base in 1e-5f64..1.0, factor in 0.01f64..=1.0, every in 1u64..1_000_000,
    ) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (x, y) = (lr_at(lo, base, factor, every), lr_at(hi, base, factor, every));
        prop_assert!(y <= x);
        prop_assert!(y >= 0.0);
    }

    #[test]
    fn adagrad_accumulators_are_monotone(steps in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..8)) {
        let mut params = Params::new();
        params.insert("w", Tensor::vector(vec![0.1, -0.2, 0.3]));
        let mut state = OptState::default();
        let mut last = vec![0.0; 3];
        for g in steps {
            let grads: Grads = BTreeMap::from([("w".to_string(), g)]);
            adagrad_step(&mut params, &grads, &mut state, 0.1);
            let acc = &state.accumulators["w"];
            for (a, l) in acc.iter().zip(&last) {
                prop_assert!(*a >= *l && *a >= 0.0);
            }
            last = acc.clone();
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        x in prop::collection::vec(-30.0f64..30.0, 12),
        shift in -100.0f64..100.0,
    ) {
        let mut g = Graph::new(Mode::Eval);
        let a = g.constant(Tensor::new(&[3, 4], x.clone()).unwrap());
        let b = g.constant(Tensor::new(&[3, 4], x.iter().map(|v| v + shift).collect()).unwrap());
        let sa = g.softmax(a, 1).unwrap();
        let sb = g.softmax(b, 1).unwrap();
        for r in 0..3 {
            let row = g.value(sa).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            for (p, q) in row.iter().zip(g.value(sb).row(r)) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn segment_means_average_to_global_mean_on_dyadic_lengths(
        log_n in 0u32..3, log_len in 0u32..3, d in 1usize..5,
        vals in prop::collection::vec(-100i32..100, 64 * 4),
    ) {
        let (n, len) = (1usize << log_n, 1usize << log_len);
        let t = n * len;
        let f = Tensor::new(&[t, d], vals[..t * d].iter().map(|&v| v as f64).collect()).unwrap();
        let segs = segment_means(&f, n).unwrap();
        let global = segment_means(&f, 1).unwrap().remove(0);
        for j in 0..d {
            prop_assert_eq!(segs.iter().map(|s| s[j]).sum::<f64>() / n as f64, global[j]);
        }
    }

    #[test]
    fn augmentation_yields_n_plus_one_copies(lens in prop::collection::vec(4usize..12, 1..6), n in 1usize..4) {
        let mut ds = Dataset::new(2, 3);
        for (i, &t) in lens.iter().enumerate() {
            let frames = Tensor::new(&[t, 2], (0..2 * t).map(|k| (k as f64).sin()).collect()).unwrap();
            ds.examples.push(FrameExample { id: format!("v{i}"), frames, labels: vec![i % 3] });
        }
        prop_assert_eq!(augment_dataset(&ds, n).unwrap().len(), (n + 1) * lens.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn confidences_stay_open_interval_for_large_inputs(
        x in prop::collection::vec(-1000.0f64..1000.0, 4 * 6),
        seed in 0u64..1000,
    ) {
        let x = Tensor::new(&[4, 6], x).unwrap();
        let lc = LCSpec { latent_dim: 8, ..LCSpec::default() };
        for spec in [ModelSpec::moe(6, 5, 3), ModelSpec::more(6, 5, 3, 10).with_lc(lc.clone())] {
            let mut model = Model::new(spec, seed).unwrap();
            if model.spec.lc_head.is_some() {
                model.attach_lc().unwrap();
            }
            let p = model.predict(Input::Videos(&x)).unwrap();
            prop_assert!(p.values().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn frame_pooling_ignores_frame_order(
        t in 2usize..9,
        frames in prop::collection::vec(-3.0f64..3.0, 8 * 5),
        perm_seed in any::<u64>(),
        seed in 0u64..100,
    ) {
        let f = Tensor::new(&[t, 5], frames[..t * 5].to_vec()).unwrap();
        let mut order: Vec<usize> = (0..t).collect();
        let mut s = perm_seed;
        for i in (1..t).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let shuffled = Tensor::new(&[t, 5], order.iter().flat_map(|&i| f.row(i).to_vec()).collect()).unwrap();
        for pooling in [
            Pooling::AttentiveDbof { code_dim: 6 },
            Pooling::NetVlad { clusters: 3, code_dim: 4, out_dim: 6, assignment: Default::default() },
        ] {
            let model = Model::new(ModelSpec::moe(5, 4, 2).with_pooling(pooling), seed).unwrap();
            let a = model.predict(Input::Frames(std::slice::from_ref(&f))).unwrap().into_values();
            let b = model.predict(Input::Frames(std::slice::from_ref(&shuffled))).unwrap().into_values();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical(seed in 0u64..1000, x in prop::collection::vec(-2.0f64..2.0, 3 * 4)) {
        let x = Tensor::new(&[3, 4], x).unwrap();
        let mut model = Model::new(ModelSpec::more(4, 3, 2, 6), seed).unwrap();
        model.params.quantize_f32();
        let back = checkpoint::from_bytes(&checkpoint::to_bytes(&model).unwrap()).unwrap();
        prop_assert_eq!(
            model.predict(Input::Videos(&x)).unwrap().into_values(),
            back.predict(Input::Videos(&x)).unwrap().into_values()
        );
    }

    #[test]
    fn segmented_inference_matches_plain_on_constant_videos(
        row in prop::collection::vec(-1.0f64..1.0, 4),
        t in 3usize..12,
        seed in 0u64..100,
    ) {
        let model = Model::new(ModelSpec::more(4, 3, 2, 6), seed).unwrap();
        let f = Tensor::new(&[t, 4], row.repeat(t)).unwrap();
        let g = Tensor::new(&[1, 4], mean_pool(&f)).unwrap();
        prop_assert_eq!(
            segmented_inference(&model, &f, 3, &SEGMENT_WEIGHTS).unwrap(),
            model.predict(Input::Videos(&g)).unwrap().into_values()
        );
    }

    #[test]
    fn loo_weights_follow_member_order(
        base in prediction_set(8, 5),
        extra in prop::collection::vec(grid_scores(40), 2),
        rot in 0usize..3,
    ) {
        prop_assume!(has_labels(&base) && base.scores().len() <= 40);
        let n = base.scores().len();
        let members: Vec<PredictionSet> =
            std::iter::once(base.clone()).chain(extra.iter().map(|s| base.with_scores(s[..n].to_vec()).unwrap())).collect();
        let names: Vec<String> = (0..3).map(|i| format!("m{i}")).collect();
        let refs: Vec<&PredictionSet> = members.iter().collect();
        let metric = Metric::Gap { k: 3 };
        let w = leave_one_out_weights(&names, &refs, metric).unwrap().weights();

        let order: Vec<usize> = (0..3).map(|i| (i + rot) % 3).collect();
        let rotated: Vec<&PredictionSet> = order.iter().map(|&i| refs[i]).collect();
        let rnames: Vec<String> = order.iter().map(|&i| names[i].clone()).collect();
        let rw = leave_one_out_weights(&rnames, &rotated, metric).unwrap().weights();
        for (j, &i) in order.iter().enumerate() {
            prop_assert_eq!(rw[j], w[i]);
        }

        let dup = leave_one_out_weights(&names, &[refs[0], refs[1], refs[1]], metric).unwrap().weights();
        prop_assert_eq!(dup[1], dup[2]);
    }
}

#[test]
fn gap_can_fall_as_k_grows_across_videos() {
    // Video A has no labels; its second prediction outranks B's miss.
    let p = PredictionSet::new(
        vec!["a".into(), "b".into()],
        2,
        vec![0.9, 0.8, 0.5, 0.1],
        vec![vec![], vec![0]],
    )
    .unwrap();
    assert_eq!(gap_at_k(&p, 1).unwrap(), 0.5);
    assert_eq!(gap_at_k(&p, 2).unwrap(), 1.0 / 3.0);
}
