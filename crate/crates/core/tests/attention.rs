use crpa::attention::{attend_mixed, AttendOptions, KeyId, PoolMode, RegionLayout};
use crpa::posmap::Scheme;
use crpa::rope::{score_multiaxis_relative, RopeLayout};
use crpa::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Three LR cells, two upsampled cells, four LR cells at ratio 2.
fn toy() -> RegionLayout {
    RegionLayout::from_hr_mask(vec![9], vec![2], (0..9).map(|c| c == 3 || c == 4).collect()).unwrap()
}

fn token_at(layout: &RegionLayout, phys: f64) -> usize {
    layout.tokens().iter().position(|t| t.physical[0] == phys).unwrap()
}

fn logit(layout: &RegionLayout, scheme: Scheme, rope: &RopeLayout, x: &Matrix, query: usize, key: usize) -> f64 {
    let opts = AttendOptions { keep_scores: true, ..Default::default() };
    let out = attend_mixed(layout, x, x, x, scheme, rope, &opts).unwrap();
    let s = out.scores.unwrap();
    let ctx = &s.contexts[s.query_context[query]];
    let j = ctx.iter().position(|k| *k == KeyId::Token(key)).unwrap();
    s.logits[query][j]
}

#[test]
fn equal_content_keys_see_physical_offsets() {
    let rope = RopeLayout::uniform(1, 8, 100.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let c: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let l = toy();
    let x = Matrix::from_rows(&vec![c.clone(); l.num_tokens()]).unwrap();
    let scale = 1.0 / 8f64.sqrt();
    let reference = |delta: f64| score_multiaxis_relative(&c, &c, &[delta], &rope).unwrap() * scale;

    // HR query at 8: LR key at 10 and HR key at 6 are two query strides away
    let q = token_at(&l, 8.0);
    let (lr_key, hr_key) = (token_at(&l, 10.0), token_at(&l, 6.0));
    for (key, delta) in [(lr_key, 2.0), (hr_key, -2.0)] {
        assert!((logit(&l, Scheme::Crpa, &rope, &x, q, key) - reference(delta)).abs() <= 1e-9);
        assert!((logit(&l, Scheme::PiLr, &rope, &x, q, key) - reference(delta)).abs() > 1e-3);
    }

    // LR query at 2: LR key at 4 is one query stride away
    let q = token_at(&l, 2.0);
    let key = token_at(&l, 4.0);
    assert!((logit(&l, Scheme::Crpa, &rope, &x, q, key) - reference(1.0)).abs() <= 1e-9);
    assert!((logit(&l, Scheme::PiHr, &rope, &x, q, key) - reference(1.0)).abs() > 1e-3);
}

#[test]
fn pooled_groups_conserve_content() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mask: Vec<bool> = (0..20).map(|i| i % 7 == 2 || i == 11).collect();
    let l = RegionLayout::from_hr_mask(vec![4, 5], vec![2, 3], mask).unwrap();
    let hr_tokens = l.num_tokens() - l.num_lr_tokens();
    assert_eq!(l.group_size(), 6);
    assert_eq!(l.num_groups() * l.group_size(), hr_tokens);

    let rope = RopeLayout::uniform(2, 4, 100.0).unwrap();
    let n = l.num_tokens();
    let m = |cols: usize, rng: &mut ChaCha8Rng| Matrix::new(n, cols, (0..n * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let (q, k, v) = (m(8, &mut rng), m(8, &mut rng), m(3, &mut rng));
    for pool in [PoolMode::Mean, PoolMode::Stride0] {
        let opts = AttendOptions { keep_scores: true, pool, ..Default::default() };
        let out = attend_mixed(&l, &q, &k, &v, Scheme::Crpa, &rope, &opts).unwrap();
        let s = out.scores.unwrap();
        // LR query 0: weighted sum over its context with pooled values as oracle
        let ctx = &s.contexts[s.query_context[0]];
        let mut expect = [0.0; 3];
        for (j, key) in ctx.iter().enumerate() {
            let val: Vec<f64> = match *key {
                KeyId::Token(t) => v.row(t).to_vec(),
                KeyId::Group(g) => {
                    let r = l.group_range(g);
                    match pool {
                        PoolMode::Mean => (0..3).map(|c| r.clone().map(|t| v.row(t)[c]).sum::<f64>() / r.len() as f64).collect(),
                        PoolMode::Stride0 => v.row(r.start).to_vec(),
                    }
                }
            };
            for c in 0..3 {
                expect[c] += s.weights[0][j] * val[c];
            }
        }
        for c in 0..3 {
            assert!((out.values.row(0)[c] - expect[c]).abs() <= 1e-12);
        }
    }
}

#[test]
fn misaligned_hr_boxes_are_rejected() {
    let json = r#"{"lr_shape": [4, 4], "ratio": [2, 2], "units": "hr", "hr_boxes": [{"start": [1, 0], "end": [4, 4]}]}"#;
    let err = RegionLayout::from_json_str(json).unwrap_err();
    assert!(err.to_string().contains("HR region not alignable to LR grid"));
}
