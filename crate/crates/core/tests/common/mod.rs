#![allow(dead_code)]

use safer_core::synthgen::{generate_cohort, Cohort, CohortConfig, OutcomeDesign, OutcomeLaw};
use safer_core::teacher::{FusionDims, FusionParams};

pub fn small_config(seed: u64) -> CohortConfig {
    CohortConfig {
        n_survivors: 10,
        n_deceased: 4,
        seq_len: 4,
        d_struct: 6,
        d_note: 4,
        d_static: 3,
        seed,
        ..CohortConfig::default()
    }
}

pub fn small_cohort(seed: u64) -> Cohort {
    generate_cohort(&small_config(seed)).unwrap()
}

pub fn small_dims(d_k: usize) -> FusionDims {
    let c = small_config(0);
    FusionDims {
        d_struct: c.d_struct,
        d_note: c.d_note,
        d_static: c.d_static,
        d_k,
    }
}

pub fn small_teacher(d_k: usize, seed: u64) -> FusionParams {
    FusionParams::init(small_dims(d_k), seed).unwrap()
}

pub fn prospective(n: usize, law: OutcomeLaw, seed: u64) -> CohortConfig {
    CohortConfig {
        n_survivors: n,
        n_deceased: 0,
        seed,
        outcome: OutcomeDesign::Prospective(law),
        ..CohortConfig::default()
    }
}
