mod common;

use safer_core::synthgen::{PatientRecord, N_CLASSES};
use safer_core::teacher::*;
use safer_core::training::TrainConfig;
use safer_nn::{
    causal_mask, grad_check, masked_self_attention, sinusoidal_pe, softmax, Matrix, ParamStore, Tape,
};

use common::{small_cohort, small_teacher};

// Plain matrix arithmetic, independent of the tape.

fn mm(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

fn plus_row(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            out.set(i, j, a.get(i, j) + b.get(0, j));
        }
    }
    out
}

fn plus(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    out
}

fn attention(q: &Matrix, k: &Matrix, v: &Matrix, causal: bool) -> Matrix {
    let d_k = q.cols() as f64;
    let mut w = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let visible = if causal { i + 1 } else { k.rows() };
        let logits: Vec<f64> = (0..visible)
            .map(|j| (0..q.cols()).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / d_k.sqrt())
            .collect();
        for (j, p) in softmax(&logits).into_iter().enumerate() {
            w.set(i, j, p);
        }
    }
    mm(&w, v)
}

fn oracle_embedding(record: &PatientRecord, params: &FusionParams) -> Vec<f64> {
    let s = &params.store;
    let ids = &params.layout.ids;
    let d_k = params.dims().d_k;
    let x_e = Matrix::from_rows(&record.structured).unwrap();
    let x_o = Matrix::from_rows(&record.notes).unwrap();
    let steps = x_e.rows();
    let pe = sinusoidal_pe(steps, d_k).unwrap();

    let e = plus_row(&mm(&x_e, s.get(ids.embed_e_w)), s.get(ids.embed_e_b));
    let o = plus_row(&mm(&x_o, s.get(ids.embed_o_w)), s.get(ids.embed_o_b));
    let self_att = |x: &Matrix, p: &safer_nn::AttentionParams| {
        let a = attention(&mm(x, s.get(p.w_q)), &mm(x, s.get(p.w_k)), &mm(x, s.get(p.w_v)), true);
        plus(&a, &pe)
    };
    let s_e = self_att(&e, &ids.self_e);
    let s_o = self_att(&o, &ids.self_o);
    let c = &ids.cross_e;
    let b1 = attention(&mm(&s_o, s.get(c.w_q)), &mm(&s_e, s.get(c.w_k)), &mm(&s_e, s.get(c.w_v)), false);
    let c = &ids.cross_o;
    let b2 = attention(&mm(&s_e, s.get(c.w_q)), &mm(&s_o, s.get(c.w_k)), &mm(&s_o, s.get(c.w_v)), false);
    let x_d = Matrix::row_vector(record.static_features.clone());
    let d = plus_row(&mm(&x_d, s.get(ids.static_w)), s.get(ids.static_b));

    let mut h = b1.row(steps - 1).to_vec();
    h.extend_from_slice(b2.row(steps - 1));
    h.extend_from_slice(d.row(0));
    h
}

#[test]
fn embedding_matches_straight_line_oracle() {
    let cohort = small_cohort(3);
    for seed in 0..3 {
        let params = small_teacher(6, seed);
        for r in &cohort.records {
            let h = encode_patient(r, &params).unwrap();
            let want = oracle_embedding(r, &params);
            assert_eq!(h.len(), 18);
            let err = h.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "seed {seed}, patient {}: {err}", r.id);
        }
    }
}

#[test]
fn self_attention_rows_ignore_later_steps() {
    let params = small_teacher(4, 2);
    let record = small_cohort(1).records[0].clone();
    let mut altered = record.clone();
    let steps = record.seq_len();
    altered.structured[steps - 1] = vec![9.0; record.structured[0].len()];

    let run = |r: &PatientRecord| {
        let mut tape = Tape::new();
        let bound = tape.bind(&params.store, false);
        let ids = &params.layout.ids;
        let x = tape.input(Matrix::from_rows(&r.structured).unwrap());
        let e = tape.affine(x, bound.get(ids.embed_e_w), bound.get(ids.embed_e_b)).unwrap();
        let pe = sinusoidal_pe(steps, 4).unwrap();
        let out = masked_self_attention(&mut tape, &bound, e, &ids.self_e, &causal_mask(steps), &pe).unwrap();
        tape.value(out.output).clone()
    };
    let a = run(&record);
    let b = run(&altered);
    for t in 0..steps - 1 {
        assert_eq!(a.row(t), b.row(t), "row {t}");
    }
    assert_ne!(a.row(steps - 1), b.row(steps - 1));
}

#[test]
fn zero_head_gives_uniform_distribution() {
    let mut params = small_teacher(4, 0);
    let ids = params.layout.ids;
    for id in [ids.out_w, ids.out_b] {
        params.store.get_mut(id).data_mut().fill(0.0);
    }
    let out = run_teacher(&small_cohort(0).records[0], &params).unwrap();
    for p in out.probs {
        assert!((p - 1.0 / N_CLASSES as f64).abs() < 1e-15);
    }
}

#[test]
fn probabilities_and_logits_agree() {
    let params = small_teacher(8, 5);
    for r in &small_cohort(5).records {
        let out = run_teacher(r, &params).unwrap();
        assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(out.probs.iter().all(|&p| p > 0.0));
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        assert_eq!(argmax(&out.probs), argmax(&out.logits));
        assert_eq!(treatment_logits(&out.h, &params).unwrap(), out.logits);
    }
}

#[test]
fn notes_contribute_to_the_embedding() {
    let params = small_teacher(4, 1);
    let r = small_cohort(2).records[0].clone();
    let mut silent = r.clone();
    for row in &mut silent.notes {
        row.fill(0.0);
    }
    assert_ne!(encode_patient(&r, &params).unwrap(), encode_patient(&silent, &params).unwrap());
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 1e-2,
        batch_size: 4,
        seed: 9,
        weight_decay: 0.0,
    }
}

#[test]
fn training_is_reproducible_and_reduces_loss() {
    let records = small_cohort(4).records;
    let params = small_teacher(4, 4);
    let (a, log_a) = train_teacher(&records, &params, &config(20)).unwrap();
    let (b, log_b) = train_teacher(&records, &params, &config(20)).unwrap();
    assert_eq!(a.store.max_abs_diff(&b.store), 0.0);
    assert_eq!(log_a, log_b);
    assert!(log_a.last().unwrap() <= log_a.first().unwrap());

    let (same, log) = train_teacher(&records, &params, &config(0)).unwrap();
    assert_eq!(same.store.max_abs_diff(&params.store), 0.0);
    assert!(log.epochs.is_empty());
    assert!(train_teacher(&[], &params, &config(1)).is_err());
}

#[test]
fn full_batch_loss_ignores_patient_order() {
    let records = small_cohort(6).records;
    let mut reversed = records.clone();
    reversed.reverse();
    let params = small_teacher(4, 6);
    let cfg = TrainConfig { batch_size: records.len(), ..config(1) };
    let (_, a) = train_teacher(&records, &params, &cfg).unwrap();
    let (_, b) = train_teacher(&reversed, &params, &cfg).unwrap();
    assert!((a.first().unwrap() - b.first().unwrap()).abs() < 1e-12);
}

#[test]
fn separable_toy_problem_is_learned() {
    let dims = FusionDims { d_struct: 2, d_note: 2, d_static: 1, d_k: 4 };
    let mut records = Vec::new();
    for i in 0..40 {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        let jitter = (i as f64 * 0.37).sin() * 0.2;
        records.push(PatientRecord {
            id: format!("toy{i}"),
            structured: vec![vec![sign + jitter, -sign]; 3],
            notes: vec![vec![sign, jitter]; 3],
            static_features: vec![jitter],
            treatments: vec![0; 3],
            next_treatment: if sign > 0.0 { 3 } else { 17 },
            survived: true,
        });
    }
    let params = FusionParams::init(dims, 0).unwrap();
    let (trained, _) = train_teacher(&records, &params, &TrainConfig { epochs: 50, ..config(0) }).unwrap();
    let correct = records
        .iter()
        .filter(|r| {
            let p = run_teacher(r, &trained).unwrap().probs;
            let best = (0..N_CLASSES).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
            best == r.next_treatment
        })
        .count();
    assert!(correct as f64 / records.len() as f64 >= 0.95, "{correct}/40");
}

#[test]
fn teacher_gradients_match_finite_differences() {
    let params = small_teacher(4, 8);
    let records: Vec<PatientRecord> = small_cohort(8).records.into_iter().take(3).collect();
    let inputs: Vec<PatientInputs> = records.iter().map(|r| PatientInputs::from_record(r).unwrap()).collect();
    let layout = params.layout;
    let loss = |store: &ParamStore| {
        let mut tape = Tape::new();
        let bound = tape.bind(store, true);
        let mut terms = Vec::new();
        for (x, r) in inputs.iter().zip(&records) {
            let g = forward_on_tape(&mut tape, &bound, &layout, x).unwrap();
            terms.push((tape.softmax_cross_entropy(g.logits, r.next_treatment)?, 1.0 / 3.0));
        }
        let l = tape.weighted_sum(&terms)?;
        Ok((tape.scalar(l), tape.backward(l)?.params(&bound, store)))
    };
    let report = grad_check(loss, &params.store, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
