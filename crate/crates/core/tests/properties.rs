use crpa::attention::{attend_mixed, AttendOptions, RegionLayout};
use crpa::boundary::{dilate_mask, noise_vector, Mask};
use crpa::kernel::{decompose, eval_kernel};
use crpa::posmap::{crpa_remap, Scheme, StrideRatio};
use crpa::probe::{kappa_curve, rds_score, Axis, PairSample};
use crpa::rope::{
    make_frequencies, rotate, score_absolute, score_relative, AxisPosition, RopeLayout,
};
use crpa::tensor::Matrix;
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = usize> {
    prop_oneof![Just(2usize), Just(4), Just(8), Just(64), Just(128)]
}

fn pair(d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-1.0f64..1.0, d),
        prop::collection::vec(-1.0f64..1.0, d),
    )
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn score_depends_only_on_offset((d, (q, k)) in dims().prop_flat_map(|d| (Just(d), pair(d))), pq in -100.0f64..100.0, pk in -100.0f64..100.0, shift in -100.0f64..100.0) {
        let fs = make_frequencies(d, 10000.0).unwrap();
        let p = |x: f64| AxisPosition::new(x).unwrap();
        let a = score_absolute(&q, &k, p(pq), p(pk), &fs).unwrap();
        let b = score_absolute(&q, &k, p(pq + shift), p(pk + shift), &fs).unwrap();
        let r = score_relative(&q, &k, pk - pq, &fs).unwrap();
        prop_assert!((a - r).abs() <= 1e-11);
        prop_assert!((a - b).abs() <= 1e-11);
    }

    #[test]
    fn rotation_preserves_norm_and_composes((d, (q, _)) in dims().prop_flat_map(|d| (Just(d), pair(d))), a in -50.0f64..50.0, b in -50.0f64..50.0) {
        let fs = make_frequencies(d, 10000.0).unwrap();
        let p = |x: f64| AxisPosition::new(x).unwrap();
        let ra = rotate(&q, p(a), &fs).unwrap();
        prop_assert!((norm(&ra) - norm(&q)).abs() <= 1e-12);
        let rab = rotate(&ra, p(b), &fs).unwrap();
        let direct = rotate(&q, p(a + b), &fs).unwrap();
        for (x, y) in rab.iter().zip(&direct) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        let back = rotate(&ra, p(-a), &fs).unwrap();
        for (x, y) in back.iter().zip(&q) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn kernel_matches_relative_score((d, (q, k)) in dims().prop_flat_map(|d| (Just(d), pair(d))), delta in -200.0f64..200.0) {
        let fs = make_frequencies(d, 10000.0).unwrap();
        let kernel = decompose(&q, &k, &fs).unwrap();
        prop_assert!((eval_kernel(&kernel, delta) - score_relative(&q, &k, delta, &fs).unwrap()).abs() <= 1e-11);
        for t in kernel.terms() {
            prop_assert!(t.amplitude >= 0.0);
            prop_assert!(t.phase > -std::f64::consts::PI && t.phase <= std::f64::consts::PI);
        }
    }

    #[test]
    fn joint_rotation_keeps_kernel((d, (q, k)) in dims().prop_flat_map(|d| (Just(d), pair(d))), p in -100.0f64..100.0) {
        let fs = make_frequencies(d, 10000.0).unwrap();
        let pos = AxisPosition::new(p).unwrap();
        let a = decompose(&q, &k, &fs).unwrap();
        let b = decompose(&rotate(&q, pos, &fs).unwrap(), &rotate(&k, pos, &fs).unwrap(), &fs).unwrap();
        for (x, y) in a.terms().iter().zip(b.terms()) {
            prop_assert!((x.amplitude - y.amplitude).abs() <= 1e-12);
            prop_assert!((x.eval(0.7) - y.eval(0.7)).abs() <= 1e-12);
        }
    }

    #[test]
    fn rds_ignores_row_scale(rows in prop::collection::vec(prop::collection::vec(0.1f64..2.0, 5), 4), scales in prop::collection::vec(0.01f64..100.0, 4)) {
        let w = Matrix::from_rows(&rows).unwrap();
        let scaled: Vec<Vec<f64>> = rows.iter().zip(&scales).map(|(r, s)| r.iter().map(|x| x * s).collect()).collect();
        let a = rds_score(&w, 0.085).unwrap().rds;
        let b = rds_score(&Matrix::from_rows(&scaled).unwrap(), 0.085).unwrap().rds;
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn kappa_is_a_cosine(samples in prop::collection::vec(pair(8), 1..16), deltas in prop::collection::vec(-40.0f64..40.0, 1..8)) {
        prop_assume!(samples.iter().all(|(q, k)| norm(q) > 1e-6 && norm(k) > 1e-6));
        let fs = make_frequencies(8, 100.0).unwrap();
        let s: Vec<PairSample> = samples.into_iter().map(|(q, k)| PairSample::new(q, k)).collect();
        let c = kappa_curve(&s, &fs, &deltas, Axis::T).unwrap();
        prop_assert!(c.means.iter().all(|m| (-1.0..=1.0).contains(m)));
    }

    #[test]
    fn dilation_is_monotone(bits in prop::collection::vec(any::<bool>(), 30), pad in 0usize..4) {
        let m = Mask::new(vec![5, 6], bits).unwrap();
        let d = dilate_mask(&m, pad);
        prop_assert!(m.is_subset_of(&d));
        prop_assert!(d.is_subset_of(&dilate_mask(&m, pad + 1)));
        if pad == 0 {
            prop_assert_eq!(&d, &m);
        }
    }

    #[test]
    fn attention_rows_are_convex(bits in prop::collection::vec(any::<bool>(), 12), seed in 0u64..1000) {
        let layout = RegionLayout::from_hr_mask(vec![3, 4], vec![2, 2], bits).unwrap();
        let n = layout.num_tokens();
        let rope = RopeLayout::uniform(2, 4, 100.0).unwrap();
        let gen = |off: u64, cols: usize| {
            let data = (0..n * cols).map(|i| noise_vector(seed, off as usize, i as u64, 1)[0]).collect();
            Matrix::new(n, cols, data).unwrap()
        };
        let (q, k, v) = (gen(0, 8), gen(1, 8), gen(2, 2));
        let opts = AttendOptions { keep_scores: true, ..Default::default() };
        for s in Scheme::ALL {
            let out = attend_mixed(&layout, &q, &k, &v, s, &rope, &opts).unwrap();
            for w in out.scores.unwrap().weights {
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(w.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn remap_scales_by_stride_ratio(p in -1000.0f64..1000.0, sq in 0.25f64..8.0, sk in 0.25f64..8.0) {
        let sr = StrideRatio::new(sq, sk).unwrap();
        let r = crpa_remap(AxisPosition::new(p).unwrap(), &sr).value();
        prop_assert!((r - p * sk / sq).abs() <= 1e-9 * (1.0 + p.abs()));
        let same = StrideRatio::new(sq, sq).unwrap();
        prop_assert_eq!(crpa_remap(AxisPosition::new(p).unwrap(), &same).value(), p);
    }

    #[test]
    fn noise_is_a_pure_function(seed in any::<u64>(), t in 0usize..100, key in any::<u64>()) {
        let a = noise_vector(seed, t, key, 4);
        prop_assert_eq!(&a, &noise_vector(seed, t, key, 4));
        prop_assert!(a != noise_vector(seed, t + 1, key, 4));
    }
}
