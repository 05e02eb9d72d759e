mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safer_core::stats::{mean, welch_t};
use safer_core::synthgen::*;
use safer_core::SaferError;

use common::{prospective, small_cohort, small_config};

fn to_bytes(cohort: &Cohort) -> Vec<u8> {
    let mut buf = Vec::new();
    write_cohort_to(cohort, &mut buf).unwrap();
    buf
}

#[test]
fn file_round_trip_is_exact() {
    let c = small_cohort(5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cohort.jsonl");
    write_cohort(&c, &path).unwrap();
    let back = read_cohort(&path).unwrap();
    assert_eq!(back, c);
    assert!(back.truth.is_some());
}

#[test]
fn prospective_round_trip_keeps_risks() {
    let mut cfg = prospective(30, OutcomeLaw::default(), 2);
    cfg.seq_len = 3;
    let c = generate_cohort(&cfg).unwrap();
    let back = read_cohort_from(to_bytes(&c).as_slice()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.truth.unwrap()[0].death_risk.as_ref().unwrap().len(), N_CLASSES);
}

#[test]
fn same_seed_gives_identical_bytes() {
    assert_eq!(to_bytes(&small_cohort(11)), to_bytes(&small_cohort(11)));
    assert_ne!(to_bytes(&small_cohort(11)), to_bytes(&small_cohort(12)));
}

fn replace_line(bytes: &[u8], line: usize, f: impl Fn(&mut serde_json::Value)) -> Vec<u8> {
    let text = String::from_utf8(bytes.to_vec()).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    let mut v: serde_json::Value = serde_json::from_str(&lines[line]).unwrap();
    f(&mut v);
    lines[line] = serde_json::to_string(&v).unwrap();
    (lines.join("\n") + "\n").into_bytes()
}

#[test]
fn out_of_range_treatment_names_the_line() {
    let bytes = to_bytes(&small_cohort(1));
    let bad = replace_line(&bytes, 3, |v| v["next_treatment"] = 25.into());
    match read_cohort_from(bad.as_slice()) {
        Err(SaferError::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn ragged_steps_are_rejected() {
    let bytes = to_bytes(&small_cohort(1));
    let bad = replace_line(&bytes, 2, |v| {
        v["structured"].as_array_mut().unwrap().pop();
    });
    match read_cohort_from(bad.as_slice()) {
        Err(SaferError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn default_cohort_has_the_reference_death_ratio() {
    let c = generate_cohort(&CohortConfig::default()).unwrap();
    assert_eq!(c.len(), 355);
    let ratio = c.n_deceased() as f64 / c.len() as f64;
    assert!((ratio - 427.0 / 3545.0).abs() < 0.005, "ratio {ratio}");
}

#[test]
fn survivor_labels_are_optimal() {
    let c = generate_cohort(&small_config(3)).unwrap();
    for (r, t) in c.records.iter().zip(c.truth.as_ref().unwrap()) {
        if r.survived {
            assert_eq!(r.next_treatment, t.optimal_next);
            assert_eq!(r.treatments, t.optimal_treatments);
        }
    }
}

#[test]
fn deceased_label_noise_rate_is_honoured() {
    let cfg = CohortConfig {
        n_survivors: 10,
        n_deceased: 1000,
        seq_len: 2,
        d_struct: 2,
        d_note: 2,
        d_static: 1,
        deceased_label_noise: 0.5,
        seed: 21,
        ..CohortConfig::default()
    };
    let c = generate_cohort(&cfg).unwrap();
    let truth = c.truth.as_ref().unwrap();
    let flipped = c
        .records
        .iter()
        .zip(truth)
        .filter(|(r, _)| !r.survived)
        .filter(|(r, t)| r.next_treatment != t.optimal_next)
        .count();
    let frac = flipped as f64 / 1000.0;
    assert!((frac - 0.5).abs() <= 0.05, "mismatch fraction {frac}");
}

fn mean_latent(t: &PatientTruth, axis: usize) -> f64 {
    mean(&t.latent.iter().map(|z| z[axis]).collect::<Vec<_>>())
}

#[test]
fn zero_shift_groups_are_indistinguishable() {
    let cfg = CohortConfig {
        n_survivors: 300,
        n_deceased: 300,
        latent_shift: 0.0,
        deceased_label_noise: 0.0,
        d_struct: 4,
        d_note: 2,
        d_static: 2,
        seed: 8,
        ..CohortConfig::default()
    };
    let c = generate_cohort(&cfg).unwrap();
    let truth = c.truth.as_ref().unwrap();
    for axis in 0..LATENT_DIM {
        let pick = |alive: bool| -> Vec<f64> {
            c.records
                .iter()
                .zip(truth)
                .filter(|(r, _)| r.survived == alive)
                .map(|(_, t)| mean_latent(t, axis))
                .collect()
        };
        let t = welch_t(&pick(true), &pick(false));
        assert!(t.abs() < 1.96, "axis {axis}: t = {t}");
    }
}

/// KL divergence between two bivariate Gaussians.
fn gaussian_kl(m0: [f64; 2], s0: [[f64; 2]; 2], m1: [f64; 2], s1: [[f64; 2]; 2]) -> f64 {
    let det = |s: [[f64; 2]; 2]| s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let d1 = det(s1);
    let inv1 = [[s1[1][1] / d1, -s1[0][1] / d1], [-s1[1][0] / d1, s1[0][0] / d1]];
    let trace = (0..2).map(|i| (0..2).map(|k| inv1[i][k] * s0[k][i]).sum::<f64>()).sum::<f64>();
    let dm = [m1[0] - m0[0], m1[1] - m0[1]];
    let quad = (0..2).map(|i| (0..2).map(|k| dm[i] * inv1[i][k] * dm[k]).sum::<f64>()).sum::<f64>();
    0.5 * (trace + quad - 2.0 + (d1 / det(s0)).ln())
}

fn fit(points: &[[f64; 2]]) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = points.len() as f64;
    let m = [
        points.iter().map(|p| p[0]).sum::<f64>() / n,
        points.iter().map(|p| p[1]).sum::<f64>() / n,
    ];
    let mut s = [[0.0; 2]; 2];
    for p in points {
        for i in 0..2 {
            for k in 0..2 {
                s[i][k] += (p[i] - m[i]) * (p[k] - m[k]) / (n - 1.0);
            }
        }
    }
    (m, s)
}

#[test]
fn latent_divergence_grows_with_shift() {
    let kl = |shift: f64| {
        let cfg = CohortConfig {
            n_survivors: 400,
            n_deceased: 400,
            latent_shift: shift,
            d_struct: 2,
            d_note: 2,
            d_static: 1,
            seed: 4,
            ..CohortConfig::default()
        };
        let c = generate_cohort(&cfg).unwrap();
        let truth = c.truth.as_ref().unwrap();
        let group = |alive: bool| -> Vec<[f64; 2]> {
            c.records
                .iter()
                .zip(truth)
                .filter(|(r, _)| r.survived == alive)
                .map(|(_, t)| [mean_latent(t, 0), mean_latent(t, 1)])
                .collect()
        };
        let (m0, s0) = fit(&group(false));
        let (m1, s1) = fit(&group(true));
        gaussian_kl(m0, s0, m1, s1)
    };
    let values: Vec<f64> = [1.0, 2.0, 4.0].into_iter().map(kl).collect();
    assert!(values[0] < values[1] && values[1] < values[2], "{values:?}");
}

#[test]
fn every_class_is_assigned_with_positive_frequency() {
    for cfg in [
        CohortConfig::default(),
        prospective(100, OutcomeLaw::default(), 0),
    ] {
        let floor = positivity_floor(&cfg);
        assert!(floor > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for optimal in [0, 12, 24] {
            let draws = 200_000;
            let mut counts = [0usize; N_CLASSES];
            for _ in 0..draws {
                counts[sample_assignment(&cfg, optimal, &mut rng)] += 1;
            }
            for (k, &n) in counts.iter().enumerate() {
                let freq = n as f64 / draws as f64;
                assert!(freq >= 0.5 * floor, "class {k} given {optimal}: {freq} vs floor {floor}");
            }
        }
    }
}

#[test]
fn prospective_risk_is_lowest_under_the_optimal_treatment() {
    let c = generate_cohort(&prospective(50, OutcomeLaw::default(), 6)).unwrap();
    for t in c.truth.as_ref().unwrap() {
        let risk = t.death_risk.as_ref().unwrap();
        // stored risks carry nine digits, so extreme ones saturate at 1
        let best = risk[t.optimal_next];
        assert!(risk.iter().all(|&p| p >= best && p > 0.0 && p <= 1.0), "{best} {risk:?}");
    }
}

#[test]
fn adjacent_dose_roughly_doubles_the_odds() {
    let law = OutcomeLaw::default();
    // latent at the center of cell (2, 2); the cell to its right is one step away
    let z = [0.0, 0.0];
    let odds = |p: f64| p / (1.0 - p);
    let ratio = odds(law.death_probability(&z, class_of(2, 3))) / odds(law.death_probability(&z, class_of(2, 2)));
    assert!((ratio - 2.0).abs() < 1e-9, "odds ratio {ratio}");
}

#[test]
fn split_matches_ratio_arithmetic() {
    let c = CohortConfig {
        n_survivors: 8,
        n_deceased: 2,
        ..small_config(0)
    };
    let c = generate_cohort(&c).unwrap();
    let (a, b, t) = split_cohort(&c, SplitRatios::default(), 3).unwrap();
    assert_eq!((a.len(), b.len(), t.len()), (8, 1, 1));
    let err = split_cohort(&c, SplitRatios { train: 0.5, cal: 0.5, test: 0.0 }, 3);
    assert!(matches!(err, Err(SaferError::Split(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_is_a_patient_partition(n_surv in 8usize..40, n_dead in 2usize..10, seed in any::<u64>()) {
        let cfg = CohortConfig { n_survivors: n_surv, n_deceased: n_dead, seq_len: 2, d_struct: 2, d_note: 2, d_static: 1, seed: 1, ..CohortConfig::default() };
        let c = generate_cohort(&cfg).unwrap();
        let (a, b, t) = split_cohort(&c, SplitRatios::default(), seed).unwrap();
        let again = split_cohort(&c, SplitRatios::default(), seed).unwrap();
        prop_assert_eq!(&again.0.records, &a.records);
        let ids: Vec<&str> = a.records.iter().chain(&b.records).chain(&t.records).map(|r| r.id.as_str()).collect();
        let unique: HashSet<&str> = ids.iter().copied().collect();
        prop_assert_eq!(ids.len(), c.len());
        prop_assert_eq!(unique.len(), c.len());
        let all: HashSet<&str> = c.records.iter().map(|r| r.id.as_str()).collect();
        prop_assert_eq!(unique, all);
        // truth stays aligned with its record
        let truth = a.truth.as_ref().unwrap();
        for (r, tr) in a.records.iter().zip(truth) {
            if r.survived {
                prop_assert_eq!(r.next_treatment, tr.optimal_next);
            }
        }
    }

    #[test]
    fn quantize_is_idempotent(x in -1e6f64..1e6) {
        let q = quantize(x);
        prop_assert_eq!(quantize(q), q);
        prop_assert!((q - x).abs() <= 1e-8 * x.abs().max(1e-300));
    }
}
