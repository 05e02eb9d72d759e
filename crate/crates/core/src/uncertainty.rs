//! Survivor-trained student, KL uncertainty scores and risk-aware fine-tuning.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use safer_nn::{Bound, Matrix, ParamId, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaferError};
use crate::seeds::rng_from;
use crate::stats::{mean, percentile_interval};
use crate::synthgen::{PatientRecord, N_CLASSES};
use crate::teacher::{forward_on_tape, prepare, run_teacher, FusionLayout, FusionParams};
use crate::training::{EpochLoss, TrainConfig, TrainLog, Trainer};

pub const DEFAULT_STUDENT_DECAY: f64 = 1e-4;
const SPECTRAL_ITERATIONS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StudentLayout {
    pub d_in: usize,
    pub hidden: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Two-layer tanh perceptron over teacher embeddings.
#[derive(Clone, Debug)]
pub struct StudentParams {
    pub layout: StudentLayout,
    pub store: ParamStore,
    pub weight_decay: f64,
}

impl StudentParams {
    pub fn init(d_in: usize, hidden: usize, weight_decay: f64, seed: u64) -> Result<Self> {
        if d_in == 0 || hidden == 0 {
            return Err(SaferError::Config("student widths must be at least 1".into()));
        }
        if !(weight_decay.is_finite() && weight_decay > 0.0) {
            return Err(SaferError::Config(format!("student weight decay must be positive, got {weight_decay}")));
        }
        let mut rng = rng_from(seed);
        let mut store = ParamStore::new();
        let layout = StudentLayout {
            d_in,
            hidden,
            w1: store.add_glorot("student.w1", d_in, hidden, &mut rng),
            b1: store.add_zeros("student.b1", 1, hidden),
            w2: store.add_glorot("student.w2", hidden, N_CLASSES, &mut rng),
            b2: store.add_zeros("student.b2", 1, N_CLASSES),
        };
        Ok(Self { layout, store, weight_decay })
    }

    pub fn from_store(store: ParamStore, weight_decay: f64) -> Result<Self> {
        let w1 = store
            .find("student.w1")
            .ok_or_else(|| SaferError::Config("checkpoint lacks student.w1".into()))?;
        let (d_in, hidden) = store.get(w1).shape();
        let mut fresh = Self::init(d_in, hidden, weight_decay, 0)?;
        fresh.store.check_layout(&store)?;
        fresh.store = store;
        Ok(fresh)
    }

    pub fn write_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.store.write_checkpoint(BufWriter::new(File::create(path)?))?)
    }

    pub fn read_checkpoint(path: impl AsRef<Path>, weight_decay: f64) -> Result<Self> {
        Self::from_store(ParamStore::read_checkpoint(BufReader::new(File::open(path)?))?, weight_decay)
    }

    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.layout.d_in {
            return Err(SaferError::Precondition(format!(
                "embedding has length {}, student expects {}",
                h.len(),
                self.layout.d_in
            )));
        }
        let mut tape = Tape::new();
        let bound = tape.bind(&self.store, false);
        let x = tape.input(Matrix::row_vector(h.to_vec()));
        let out = student_on_tape(&mut tape, &bound, &self.layout, x)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn predict(&self, h: &[f64]) -> Result<Vec<f64>> {
        Ok(safer_nn::softmax(&self.logits(h)?))
    }

    /// Product of the layer spectral norms. `tanh` is 1-Lipschitz, so this
    /// bounds the Lipschitz constant of the logit map.
    pub fn lipschitz_bound(&self) -> f64 {
        let s1 = self.store.get(self.layout.w1).spectral_norm(SPECTRAL_ITERATIONS);
        let s2 = self.store.get(self.layout.w2).spectral_norm(SPECTRAL_ITERATIONS);
        s1 * s2
    }
}

pub fn student_on_tape(tape: &mut Tape, bound: &Bound, layout: &StudentLayout, h: Var) -> Result<Var> {
    let a = tape.affine(h, bound.get(layout.w1), bound.get(layout.b1))?;
    let a = tape.tanh(a);
    Ok(tape.affine(a, bound.get(layout.w2), bound.get(layout.b2))?)
}

/// One frozen teacher embedding with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentExample {
    pub embedding: Vec<f64>,
    pub label: usize,
    pub survived: bool,
}

/// Cross-entropy training of the student on survivor embeddings only. The
/// store's own `weight_decay` overrides the one in `config`.
pub fn train_student(
    examples: &[StudentExample],
    params0: &StudentParams,
    config: &TrainConfig,
) -> Result<(StudentParams, TrainLog)> {
    if examples.is_empty() {
        return Err(SaferError::EmptyTraining("student needs at least one survivor".into()));
    }
    if let Some(i) = examples.iter().position(|e| !e.survived) {
        return Err(SaferError::Precondition(format!(
            "student input {i} is a deceased patient; the student trains on survivors only"
        )));
    }
    let d_in = params0.layout.d_in;
    if let Some(e) = examples.iter().find(|e| e.embedding.len() != d_in || e.label >= N_CLASSES) {
        return Err(SaferError::Precondition(format!(
            "student example with embedding length {} and label {} does not fit ({d_in}, {N_CLASSES})",
            e.embedding.len(),
            e.label
        )));
    }
    let config = TrainConfig {
        weight_decay: params0.weight_decay,
        ..config.clone()
    };
    let inputs: Vec<Matrix> = examples.iter().map(|e| Matrix::row_vector(e.embedding.clone())).collect();
    let mut params = params0.clone();
    let layout = params.layout;
    let mut trainer = Trainer::new(&params.store, &config)?;
    let mut log = TrainLog::default();
    for _ in 0..config.epochs {
        let e = trainer.epoch(&mut params.store, examples.len(), |tape, bound, batch| {
            let w = 1.0 / batch.len() as f64;
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let x = tape.input(inputs[i].clone());
                let logits = student_on_tape(tape, bound, &layout, x)?;
                terms.push((tape.softmax_cross_entropy(logits, examples[i].label)?, w));
            }
            Ok(tape.weighted_sum(&terms)?)
        })?;
        log.epochs.push(e);
    }
    Ok((params, log))
}

/// Mean student cross-entropy over `examples` without training.
pub fn student_loss(examples: &[StudentExample], params: &StudentParams) -> Result<f64> {
    let mut total = 0.0;
    for e in examples {
        let (loss, _) = safer_nn::cross_entropy_with_logits(&params.logits(&e.embedding)?, e.label)?;
        total += loss;
    }
    Ok(total / examples.len().max(1) as f64)
}

fn check_simplex(p: &[f64], name: &str) -> Result<()> {
    if let Some(x) = p.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
        return Err(SaferError::Numeric(format!("{name} distribution has non-positive entry {x}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(SaferError::Numeric(format!("{name} distribution sums to {s}")));
    }
    Ok(())
}

/// `KL(p_teacher ‖ p_student) = Σ p_θ ln(p_θ / p_φ)`.
pub fn kl_uncertainty(p_teacher: &[f64], p_student: &[f64]) -> Result<f64> {
    if p_teacher.len() != p_student.len() || p_teacher.is_empty() {
        return Err(SaferError::Precondition(format!(
            "distribution lengths {} and {} differ",
            p_teacher.len(),
            p_student.len()
        )));
    }
    check_simplex(p_teacher, "teacher")?;
    check_simplex(p_student, "student")?;
    let kl: f64 = p_teacher
        .iter()
        .zip(p_student)
        .map(|(p, q)| p * (p / q).ln())
        .sum();
    Ok(kl.max(0.0))
}

/// Min-max scaling fitted on one cohort and reusable on others.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(SaferError::InsufficientData("cannot normalize an empty list".into()));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { min, max })
    }

    /// Maps into `[0, 1]`, clipping values outside the fitted range. A
    /// degenerate range maps everything to zero.
    pub fn apply(&self, x: f64) -> f64 {
        let range = self.max - self.min;
        if range <= 0.0 {
            return 0.0;
        }
        ((x - self.min) / range).clamp(0.0, 1.0)
    }
}

pub fn normalize_uncertainty(kappas: &[f64]) -> Result<Vec<f64>> {
    let mm = MinMax::fit(kappas)?;
    Ok(kappas.iter().map(|&k| mm.apply(k)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub patient_id: String,
    pub kappa: f64,
    pub kappa_hat: f64,
    pub survived: bool,
}

pub fn write_uncertainty_csv<W: Write>(records: &[UncertaintyRecord], mut w: W) -> Result<()> {
    writeln!(w, "patient_id,survived,kappa,kappa_hat")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.patient_id, r.survived, r.kappa, r.kappa_hat)?;
    }
    Ok(())
}

/// Teacher and student evaluated together.
#[derive(Clone, Copy, Debug)]
pub struct ModelPair<'a> {
    pub teacher: &'a FusionParams,
    pub student: &'a StudentParams,
}

/// Per-patient outputs of a model pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientScore {
    pub h: Vec<f64>,
    pub teacher_probs: Vec<f64>,
    pub kappa: f64,
}

impl ModelPair<'_> {
    pub fn score(&self, record: &PatientRecord) -> Result<PatientScore> {
        let out = run_teacher(record, self.teacher)?;
        let p_student = self.student.predict(&out.h)?;
        let kappa = kl_uncertainty(&out.probs, &p_student)?;
        Ok(PatientScore {
            h: out.h,
            teacher_probs: out.probs,
            kappa,
        })
    }

    /// Scores every record; runs in parallel over patients.
    pub fn score_all(&self, records: &[PatientRecord]) -> Result<Vec<PatientScore>> {
        records.par_iter().map(|r| self.score(r)).collect()
    }

    pub fn kappas(&self, records: &[PatientRecord]) -> Result<Vec<f64>> {
        Ok(self.score_all(records)?.into_iter().map(|s| s.kappa).collect())
    }
}

/// Uncertainty records for `records`, normalized with `scale` or, when
/// `None`, with the min-max range of these records.
pub fn uncertainty_records(
    pair: ModelPair<'_>,
    records: &[PatientRecord],
    scale: Option<MinMax>,
) -> Result<Vec<UncertaintyRecord>> {
    let kappas = pair.kappas(records)?;
    let scale = match scale {
        Some(s) => s,
        None => MinMax::fit(&kappas)?,
    };
    Ok(records
        .iter()
        .zip(&kappas)
        .map(|(r, &k)| UncertaintyRecord {
            patient_id: r.id.clone(),
            kappa: k,
            kappa_hat: scale.apply(k),
            survived: r.survived,
        })
        .collect())
}

/// Frozen student used inside the risk-aware objective.
#[derive(Clone, Copy, Debug)]
pub struct FrozenStudent<'a> {
    pub layout: &'a StudentLayout,
    pub bound: &'a Bound,
}

/// `(1/B) Σ_i [(1 − κ̂_i) CE_i + γ κ_i²]` over `batch`, where `κ_i` is the live
/// teacher/student divergence. With `γ = 0` the penalty nodes are not built.
#[allow(clippy::too_many_arguments)]
pub fn risk_aware_loss(
    tape: &mut Tape,
    teacher_bound: &Bound,
    teacher: &FusionLayout,
    student: Option<FrozenStudent<'_>>,
    inputs: &[crate::teacher::PatientInputs],
    labels: &[usize],
    kappa_hat: &[f64],
    gamma: f64,
    batch: &[usize],
) -> Result<Var> {
    if gamma < 0.0 {
        return Err(SaferError::Config(format!("gamma must be >= 0, got {gamma}")));
    }
    if gamma > 0.0 && student.is_none() {
        return Err(SaferError::Precondition("a positive gamma needs the student".into()));
    }
    let w = 1.0 / batch.len() as f64;
    let mut terms = Vec::with_capacity(2 * batch.len());
    for &i in batch {
        let g = forward_on_tape(tape, teacher_bound, teacher, &inputs[i])?;
        let ce = tape.softmax_cross_entropy(g.logits, labels[i])?;
        terms.push((ce, (1.0 - kappa_hat[i]) * w));
        if gamma > 0.0 {
            let s = student.expect("checked above");
            let s_logits = student_on_tape(tape, s.bound, s.layout, g.h)?;
            let kappa = tape.kl_softmax(g.logits, s_logits)?;
            let sq = tape.square(kappa);
            terms.push((sq, gamma * w));
        }
    }
    Ok(tape.weighted_sum(&terms)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub gamma: f64,
    pub rounds: usize,
    /// `epochs` is the epoch count per round.
    pub train: TrainConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            rounds: 5,
            train: TrainConfig {
                epochs: 1,
                lr: 5e-4,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneLog {
    pub epochs: Vec<EpochLoss>,
    /// Uncertainty used in each round.
    pub rounds: Vec<Vec<UncertaintyRecord>>,
}

/// Fine-tunes the teacher with the risk-aware objective. `initial` supplies
/// the uncertainty of round zero; later rounds recompute it with the current
/// teacher and the fixed student and renormalize over `records`.
pub fn risk_aware_finetune(
    teacher: &FusionParams,
    student: &StudentParams,
    records: &[PatientRecord],
    initial: &[UncertaintyRecord],
    config: &FinetuneConfig,
) -> Result<(FusionParams, FinetuneLog)> {
    if !(config.gamma.is_finite() && config.gamma >= 0.0) {
        return Err(SaferError::Config(format!("gamma must be >= 0, got {}", config.gamma)));
    }
    if records.is_empty() {
        return Err(SaferError::EmptyTraining("fine-tuning cohort is empty".into()));
    }
    if initial.len() != records.len() || initial.iter().zip(records).any(|(u, r)| u.patient_id != r.id) {
        return Err(SaferError::Precondition(
            "uncertainty records must list the cohort's patients in order".into(),
        ));
    }
    let (inputs, labels) = prepare(records)?;
    let mut params = teacher.clone();
    let layout = params.layout;
    let mut trainer = Trainer::new(&params.store, &config.train)?;
    let mut log = FinetuneLog::default();
    let mut current = initial.to_vec();
    for round in 0..config.rounds {
        if round > 0 {
            let pair = ModelPair { teacher: &params, student };
            current = uncertainty_records(pair, records, None)?;
        }
        let kappa_hat: Vec<f64> = current.iter().map(|u| u.kappa_hat).collect();
        for _ in 0..config.train.epochs {
            let e = trainer.epoch(&mut params.store, records.len(), |tape, bound, batch| {
                let frozen = tape.bind(&student.store, false);
                let s = FrozenStudent {
                    layout: &student.layout,
                    bound: &frozen,
                };
                risk_aware_loss(tape, bound, &layout, Some(s), &inputs, &labels, &kappa_hat, config.gamma, batch)
            })?;
            log.epochs.push(e);
        }
        log.rounds.push(current.clone());
    }
    Ok((params, log))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub gap: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_survivors: usize,
    pub n_deceased: usize,
}

impl GapEstimate {
    pub fn excludes_zero(&self) -> bool {
        self.ci_low > 0.0 || self.ci_high < 0.0
    }
}

/// Mean uncertainty of deceased minus survivors, with a 95% bootstrap
/// interval that resamples each outcome group separately.
pub fn uncertainty_gap(kappas: &[f64], survived: &[bool], resamples: usize, seed: u64) -> Result<GapEstimate> {
    if kappas.len() != survived.len() {
        return Err(SaferError::Precondition("kappas and outcomes differ in length".into()));
    }
    let dead: Vec<f64> = kappas.iter().zip(survived).filter(|(_, s)| !**s).map(|(k, _)| *k).collect();
    let alive: Vec<f64> = kappas.iter().zip(survived).filter(|(_, s)| **s).map(|(k, _)| *k).collect();
    if dead.is_empty() || alive.is_empty() {
        return Err(SaferError::InsufficientData("uncertainty gap needs both outcomes".into()));
    }
    let mut rng = rng_from(seed);
    let mut resample_mean = |xs: &[f64]| {
        let n = xs.len();
        (0..n).map(|_| xs[rng.random_range(0..n)]).sum::<f64>() / n as f64
    };
    let draws = (0..resamples.max(1))
        .map(|_| resample_mean(&dead) - resample_mean(&alive))
        .collect();
    let (ci_low, ci_high) = percentile_interval(draws, 0.05);
    Ok(GapEstimate {
        gap: mean(&dead) - mean(&alive),
        ci_low,
        ci_high,
        n_survivors: alive.len(),
        n_deceased: dead.len(),
    })
}

/// Uncertainty at each prefix window of one patient.
pub fn uncertainty_trajectory(
    record: &PatientRecord,
    pair: ModelPair<'_>,
    windows: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if windows.is_empty() {
        return Err(SaferError::Config("window list is empty".into()));
    }
    windows
        .iter()
        .map(|&w| {
            if w == 0 || w > record.seq_len() {
                return Err(SaferError::Config(format!(
                    "window {w} outside 1..={}",
                    record.seq_len()
                )));
            }
            Ok((w, pair.score(&record.prefix(w))?.kappa))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_class_kl() {
        let k = kl_uncertainty(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((k - 0.14384103622589045).abs() < 1e-15);
        assert_eq!(kl_uncertainty(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
    }

    #[test]
    fn kl_rejects_zero_student_entry() {
        assert!(matches!(kl_uncertainty(&[0.5, 0.5], &[0.0, 1.0]), Err(SaferError::Numeric(_))));
        assert!(kl_uncertainty(&[0.5, 0.6], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn min_max_cases() {
        assert_eq!(normalize_uncertainty(&[2.0, 2.0, 2.0]).unwrap(), vec![0.0; 3]);
        let n = normalize_uncertainty(&[0.0, 1.0, 3.0]).unwrap();
        assert_eq!(n[0], 0.0);
        assert!((n[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(n[2], 1.0);
        let mm = MinMax { min: 1.0, max: 2.0 };
        assert_eq!(mm.apply(5.0), 1.0);
        assert_eq!(mm.apply(-5.0), 0.0);
        assert!(normalize_uncertainty(&[]).is_err());
    }

    #[test]
    fn student_requires_positive_decay() {
        assert!(StudentParams::init(6, 3, 0.0, 0).is_err());
        assert!(StudentParams::init(6, 3, 1e-4, 0).is_ok());
    }

    #[test]
    fn student_rejects_deceased_and_empty() {
        let s = StudentParams::init(4, 3, 1e-4, 0).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(train_student(&[], &s, &cfg), Err(SaferError::EmptyTraining(_))));
        let ex = vec![StudentExample { embedding: vec![0.0; 4], label: 2, survived: false }];
        assert!(matches!(train_student(&ex, &s, &cfg), Err(SaferError::Precondition(_))));
    }

    #[test]
    fn gap_needs_both_outcomes() {
        assert!(matches!(
            uncertainty_gap(&[0.1, 0.2], &[true, true], 100, 0),
            Err(SaferError::InsufficientData(_))
        ));
        let g = uncertainty_gap(&[0.1, 0.2, 0.9, 1.1], &[true, true, false, false], 500, 0).unwrap();
        assert!((g.gap - 0.85).abs() < 1e-12);
        assert!(g.excludes_zero());
    }

    #[test]
    fn lipschitz_bound_is_finite_and_positive() {
        let s = StudentParams::init(6, 4, 1e-4, 3).unwrap();
        let b = s.lipschitz_bound();
        assert!(b.is_finite() && b > 0.0);
    }
}
