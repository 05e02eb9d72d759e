use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safer_nn::{
    causal_mask, cross_attention, masked_self_attention, sinusoidal_pe, softmax, AttentionParams,
    Matrix, ParamStore, Tape,
};

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn identity_params(store: &mut ParamStore, prefix: &str, d: usize) -> AttentionParams {
    AttentionParams {
        w_q: store.add(format!("{prefix}.q"), Matrix::identity(d)),
        w_k: store.add(format!("{prefix}.k"), Matrix::identity(d)),
        w_v: store.add(format!("{prefix}.v"), Matrix::identity(d)),
    }
}

/// Straight-line single-branch attention without the tape.
fn oracle_attention(q_in: &Matrix, kv_in: &Matrix, store: &ParamStore, p: &AttentionParams) -> Matrix {
    let q = q_in.matmul(store.get(p.w_q)).unwrap();
    let k = kv_in.matmul(store.get(p.w_k)).unwrap();
    let v = kv_in.matmul(store.get(p.w_v)).unwrap();
    let d_k = q.cols() as f64;
    let mut out = Matrix::zeros(q.rows(), v.cols());
    for i in 0..q.rows() {
        let mut logits = vec![0.0; k.rows()];
        for (j, l) in logits.iter_mut().enumerate() {
            let mut dot = 0.0;
            for c in 0..q.cols() {
                dot += q.get(i, c) * k.get(j, c);
            }
            *l = dot / d_k.sqrt();
        }
        let w = softmax(&logits);
        for c in 0..v.cols() {
            let mut acc = 0.0;
            for (j, wj) in w.iter().enumerate() {
                acc += wj * v.get(j, c);
            }
            out.set(i, c, acc);
        }
    }
    out
}

#[test]
fn two_step_identity_hand_case() {
    let mut store = ParamStore::new();
    let p = identity_params(&mut store, "a", 2);
    let mut tape = Tape::new();
    let bound = tape.bind(&store, false);
    let x = tape.input(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 1.0]]).unwrap());
    let out = masked_self_attention(&mut tape, &bound, x, &p, &causal_mask(2), &sinusoidal_pe(2, 2).unwrap()).unwrap();

    // mpmath, 30 digits: softmax([0.5, 1.25] / √2)
    let w = tape.value(out.weights);
    assert_eq!(w.get(0, 0), 1.0);
    assert_eq!(w.get(0, 1), 0.0);
    assert!((w.get(1, 0) - 0.370_439_904_030_358_5).abs() < 1e-14);
    assert!((w.get(1, 1) - 0.629_560_095_969_641_5).abs() < 1e-14);

    let o = tape.value(out.output);
    assert!((o.get(0, 0) - 1.0).abs() < 1e-15);
    assert!((o.get(0, 1) - 1.0).abs() < 1e-15);
    assert!((o.get(1, 0) - 1.526_690_936_823_075_8).abs() < 1e-14);
    assert!((o.get(1, 1) - 1.169_862_401_837_781_2).abs() < 1e-14);
}

#[test]
fn cross_attention_of_identical_streams_duplicates_self_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let pe_ = identity_params(&mut store, "e", 4);
    let po = identity_params(&mut store, "o", 4);
    let s = random_matrix(&mut rng, 3, 4);
    let mut tape = Tape::new();
    let bound = tape.bind(&store, false);
    let se = tape.input(s.clone());
    let so = tape.input(s.clone());
    let out = cross_attention(&mut tape, &bound, se, so, &pe_, &po).unwrap();
    let h = tape.value(out.output);
    let plain = oracle_attention(&s, &s, &store, &pe_);
    for r in 0..3 {
        for c in 0..4 {
            assert!((h.get(r, c) - plain.get(r, c)).abs() < 1e-14);
            assert_eq!(h.get(r, c), h.get(r, c + 4));
        }
    }
}

#[test]
fn cross_attention_singleton_returns_value_projections() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let pe_ = AttentionParams::register(&mut store, "e", 4, 4, &mut rng);
    let po = AttentionParams::register(&mut store, "o", 4, 4, &mut rng);
    let se_m = random_matrix(&mut rng, 1, 4);
    let so_m = random_matrix(&mut rng, 1, 4);
    let mut tape = Tape::new();
    let bound = tape.bind(&store, false);
    let se = tape.input(se_m.clone());
    let so = tape.input(so_m.clone());
    let out = cross_attention(&mut tape, &bound, se, so, &pe_, &po).unwrap();
    let ve = se_m.matmul(store.get(pe_.w_v)).unwrap();
    let vo = so_m.matmul(store.get(po.w_v)).unwrap();
    let h = tape.value(out.output);
    for c in 0..4 {
        assert!((h.get(0, c) - ve.get(0, c)).abs() < 1e-15);
        assert!((h.get(0, 4 + c) - vo.get(0, c)).abs() < 1e-15);
    }
}

#[test]
fn cross_attention_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let pe_ = AttentionParams::register(&mut store, "e", 4, 4, &mut rng);
    let po = AttentionParams::register(&mut store, "o", 4, 4, &mut rng);
    let se_m = random_matrix(&mut rng, 2, 4);
    let so_m = random_matrix(&mut rng, 2, 4);
    let mut tape = Tape::new();
    let bound = tape.bind(&store, false);
    let se = tape.input(se_m.clone());
    let so = tape.input(so_m.clone());
    let out = cross_attention(&mut tape, &bound, se, so, &pe_, &po).unwrap();
    let b1 = oracle_attention(&so_m, &se_m, &store, &pe_);
    let b2 = oracle_attention(&se_m, &so_m, &store, &po);
    let h = tape.value(out.output);
    assert_eq!(h.shape(), (2, 8));
    for r in 0..2 {
        for c in 0..4 {
            assert!((h.get(r, c) - b1.get(r, c)).abs() < 1e-13);
            assert!((h.get(r, 4 + c) - b2.get(r, c)).abs() < 1e-13);
        }
    }
    for w in [out.weights_e, out.weights_o] {
        for r in 0..2 {
            let s: f64 = tape.value(w).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn causal_prefix_invariance(seed in any::<u64>(), steps in 2usize..9, cut in 0usize..8) {
        let cut = cut % (steps - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = AttentionParams::register(&mut store, "a", 5, 6, &mut rng);
        let x = random_matrix(&mut rng, steps, 5);
        let mut y = x.clone();
        for r in cut + 1..steps {
            for c in 0..5 {
                y.set(r, c, rng.random_range(-50.0..50.0));
            }
        }
        let pe = sinusoidal_pe(steps, 6).unwrap();
        let mask = causal_mask(steps);
        let run = |m: &Matrix| {
            let mut tape = Tape::new();
            let bound = tape.bind(&store, false);
            let xv = tape.input(m.clone());
            let out = masked_self_attention(&mut tape, &bound, xv, &p, &mask, &pe).unwrap();
            (tape.value(out.output).clone(), tape.value(out.weights).clone())
        };
        let (ox, wx) = run(&x);
        let (oy, _) = run(&y);
        for r in 0..=cut {
            prop_assert_eq!(ox.row(r), oy.row(r));
        }
        for r in 0..steps {
            let row = wx.row(r);
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
            prop_assert!(row[..=r].iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn softmax_rows_positive_and_normalised(v in prop::collection::vec(-30.0f64..30.0, 1..40)) {
        let p = softmax(&v);
        prop_assert!(p.iter().all(|&x| x > 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}
