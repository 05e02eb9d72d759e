//! Synthetic cohorts with a known generative process.
//!
//! Each patient follows a two-dimensional AR(1) latent trajectory. Structured
//! features, note embeddings and static features are noisy linear read-outs of
//! that trajectory. The clinically optimal treatment at each step is the argmax
//! of a fixed softmax policy over a 5×5 grid of latent cells. Deceased
//! patients drift towards a shifted mean and carry noisy treatment labels.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaferError};
use crate::seeds::rng_from;

pub const N_CLASSES: usize = 25;
pub const GRID_SIDE: usize = 5;
pub const LATENT_DIM: usize = 2;

const AR_COEF: f64 = 0.8;
const GRID_SPACING: f64 = 0.8;
const POLICY_TEMPERATURE: f64 = 0.5;
const STRUCT_NOISE_VAR: f64 = 0.1;
const NOTE_NOISE_VAR: f64 = 0.7;
const STATIC_SIGNAL: f64 = 0.5;
/// Seeds the emission matrices. Kept apart from the sampling seed so that
/// cohorts drawn with different seeds share one data-generating world.
const WORLD_SEED: u64 = 0x5afe_c0de_2024;

/// How death is assigned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeDesign {
    /// Fixed survivor and deceased counts; deceased trajectories drift by
    /// `latent_shift` and their labels are resampled with `deceased_label_noise`.
    #[default]
    Grouped,
    /// Death is drawn from a logistic law of the final latent state and of
    /// how far the next treatment lies from the optimal one on the dose grid.
    /// Treatments are the
    /// optimal one with probability `1 - assignment_noise`, otherwise uniform
    /// over the other classes. `n_survivors + n_deceased` is the cohort size.
    Prospective(OutcomeLaw),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutcomeLaw {
    pub base_logit: f64,
    pub latent_coef: f64,
    /// Log-odds added per unit of excess squared dose distance: how much
    /// farther, in squared grid steps, the given treatment's cell center lies
    /// from the latent state than the optimal one's. Near a cell center an
    /// adjacent dose costs about one unit.
    pub log_odds_per_dose_step: f64,
    pub assignment_noise: f64,
}

impl Default for OutcomeLaw {
    fn default() -> Self {
        Self {
            base_logit: -2.0,
            latent_coef: 2.0,
            log_odds_per_dose_step: 2f64.ln(),
            assignment_noise: 0.5,
        }
    }
}

impl OutcomeLaw {
    pub fn death_probability(&self, final_latent: &[f64], treatment: usize) -> f64 {
        let logit = self.base_logit
            + self.latent_coef * project_shift_axis(final_latent)
            + self.log_odds_per_dose_step * excess_dose_distance(final_latent, treatment);
        safer_nn::sigmoid(logit)
    }

    /// Death probability under every treatment class.
    pub fn risk_profile(&self, final_latent: &[f64]) -> Vec<f64> {
        (0..N_CLASSES).map(|a| self.death_probability(final_latent, a)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_survivors: usize,
    pub n_deceased: usize,
    pub seq_len: usize,
    pub d_struct: usize,
    pub d_note: usize,
    pub d_static: usize,
    pub n_classes: usize,
    pub latent_shift: f64,
    pub deceased_label_noise: f64,
    pub seed: u64,
    #[serde(default)]
    pub outcome: OutcomeDesign,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_survivors: 312,
            n_deceased: 43,
            seq_len: 8,
            d_struct: 44,
            d_note: 16,
            d_static: 5,
            n_classes: N_CLASSES,
            latent_shift: 3.0,
            deceased_label_noise: 0.3,
            seed: 0,
            outcome: OutcomeDesign::Grouped,
        }
    }
}

impl CohortConfig {
    pub fn n_patients(&self) -> usize {
        self.n_survivors + self.n_deceased
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SaferError::Config(msg));
        if self.n_classes != N_CLASSES {
            return bad(format!("n_classes must be {N_CLASSES}, got {}", self.n_classes));
        }
        if self.seq_len == 0 || self.d_struct == 0 || self.d_note == 0 || self.d_static == 0 {
            return bad("seq_len and all feature dimensions must be at least 1".into());
        }
        if self.n_patients() == 0 {
            return bad("cohort has no patients".into());
        }
        if !(self.latent_shift.is_finite() && self.latent_shift >= 0.0) {
            return bad(format!("latent_shift must be finite and >= 0, got {}", self.latent_shift));
        }
        if !(0.0..=1.0).contains(&self.deceased_label_noise) {
            return bad(format!(
                "deceased_label_noise must lie in [0, 1], got {}",
                self.deceased_label_noise
            ));
        }
        if let OutcomeDesign::Prospective(law) = &self.outcome {
            if !(0.0..=1.0).contains(&law.assignment_noise) {
                return bad(format!("assignment_noise must lie in [0, 1], got {}", law.assignment_noise));
            }
            if ![law.base_logit, law.latent_coef, law.log_odds_per_dose_step]
                .iter()
                .all(|v| v.is_finite())
            {
                return bad("outcome law coefficients must be finite".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    /// `T × d_struct`, one row per step.
    pub structured: Vec<Vec<f64>>,
    /// `T × d_note`.
    pub notes: Vec<Vec<f64>>,
    #[serde(rename = "static")]
    pub static_features: Vec<f64>,
    pub treatments: Vec<usize>,
    pub next_treatment: usize,
    pub survived: bool,
}

impl PatientRecord {
    pub fn seq_len(&self) -> usize {
        self.structured.len()
    }

    /// The first `steps` observations, keeping the final-step target.
    pub fn prefix(&self, steps: usize) -> PatientRecord {
        let steps = steps.min(self.seq_len());
        PatientRecord {
            id: self.id.clone(),
            structured: self.structured[..steps].to_vec(),
            notes: self.notes[..steps].to_vec(),
            static_features: self.static_features.clone(),
            treatments: self.treatments[..steps].to_vec(),
            next_treatment: self.next_treatment,
            survived: self.survived,
        }
    }

    fn check(&self, config: &CohortConfig) -> std::result::Result<(), String> {
        let t = config.seq_len;
        for (name, rows, width) in [
            ("structured", &self.structured, config.d_struct),
            ("notes", &self.notes, config.d_note),
        ] {
            if rows.len() != t {
                return Err(format!("{name} has {} steps, expected {t}", rows.len()));
            }
            if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != width) {
                return Err(format!("{name} step {i} has width {}, expected {width}", r.len()));
            }
        }
        if self.static_features.len() != config.d_static {
            return Err(format!(
                "static has width {}, expected {}",
                self.static_features.len(),
                config.d_static
            ));
        }
        if self.treatments.len() != t {
            return Err(format!("treatments has {} steps, expected {t}", self.treatments.len()));
        }
        if let Some(&bad) = self
            .treatments
            .iter()
            .chain(std::iter::once(&self.next_treatment))
            .find(|&&a| a >= N_CLASSES)
        {
            return Err(format!("treatment index {bad} outside 0..{N_CLASSES}"));
        }
        Ok(())
    }
}

/// Oracle quantities kept for evaluation. Training code never receives these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub latent: Vec<[f64; LATENT_DIM]>,
    pub optimal_treatments: Vec<usize>,
    pub optimal_next: usize,
    /// Death probability under each treatment class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub death_risk: Option<Vec<f64>>,
}

impl PatientTruth {
    pub fn death_probability(&self, treatment: usize) -> Option<f64> {
        self.death_risk.as_ref().and_then(|r| r.get(treatment).copied())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub config: CohortConfig,
    pub records: Vec<PatientRecord>,
    /// Aligned with `records` when present.
    pub truth: Option<Vec<PatientTruth>>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            config: self.config.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            truth: self
                .truth
                .as_ref()
                .map(|t| indices.iter().map(|&i| t[i].clone()).collect()),
        }
    }

    pub fn survivors(&self) -> Cohort {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.records[i].survived).collect();
        self.subset(&idx)
    }

    pub fn n_deceased(&self) -> usize {
        self.records.iter().filter(|r| !r.survived).count()
    }
}

/// Treatment class of a grid cell; fluid bucket is the row, vasopressor the column.
pub fn class_of(fluid: usize, vaso: usize) -> usize {
    fluid * GRID_SIDE + vaso
}

fn squared_steps(latent: &[f64], class: usize) -> f64 {
    let c = grid_center(class);
    ((latent[0] - c[0]).powi(2) + (latent[1] - c[1]).powi(2)) / (GRID_SPACING * GRID_SPACING)
}

/// Squared distance, in grid steps, from `latent` to the center of
/// `treatment` minus that to the optimal treatment's center. Zero for the
/// optimal treatment and positive otherwise.
pub fn excess_dose_distance(latent: &[f64], treatment: usize) -> f64 {
    squared_steps(latent, treatment) - squared_steps(latent, optimal_treatment(latent))
}

fn grid_center(class: usize) -> [f64; 2] {
    let half = (GRID_SIDE as f64 - 1.0) / 2.0;
    [
        ((class / GRID_SIDE) as f64 - half) * GRID_SPACING,
        ((class % GRID_SIDE) as f64 - half) * GRID_SPACING,
    ]
}

/// The fixed treatment policy: softmax of `-‖z - c_k‖² / τ` over grid centers.
pub fn policy_probabilities(latent: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = (0..N_CLASSES)
        .map(|k| {
            let c = grid_center(k);
            let d2 = (latent[0] - c[0]).powi(2) + (latent[1] - c[1]).powi(2);
            -d2 / POLICY_TEMPERATURE
        })
        .collect();
    safer_nn::softmax(&logits)
}

pub fn optimal_treatment(latent: &[f64]) -> usize {
    let p = policy_probabilities(latent);
    let mut best = 0;
    for k in 1..N_CLASSES {
        if p[k] > p[best] {
            best = k;
        }
    }
    best
}

fn shift_axis() -> [f64; 2] {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    [s, s]
}

fn project_shift_axis(latent: &[f64]) -> f64 {
    let u = shift_axis();
    latent[0] * u[0] + latent[1] * u[1]
}

/// Rounds to nine significant digits so that the JSON text is short and
/// parses back to the identical double.
pub fn quantize(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Uniform draw over the 24 classes other than `avoid`.
pub fn resample_away<R: Rng + ?Sized>(avoid: usize, rng: &mut R) -> usize {
    let k = rng.random_range(0..N_CLASSES - 1);
    if k >= avoid {
        k + 1
    } else {
        k
    }
}

/// Records `optimal` with probability `1 - noise`, otherwise another class.
pub fn noisy_assignment<R: Rng + ?Sized>(optimal: usize, noise: f64, rng: &mut R) -> usize {
    if noise > 0.0 && rng.random::<f64>() < noise {
        resample_away(optimal, rng)
    } else {
        optimal
    }
}

/// Marginal probability of each recorded treatment given the optimal one,
/// averaging over the outcome mix of the configured design.
pub fn assignment_probabilities(config: &CohortConfig, optimal: usize) -> Vec<f64> {
    let noise = match &config.outcome {
        OutcomeDesign::Grouped => {
            let n = config.n_patients().max(1) as f64;
            config.n_deceased as f64 / n * config.deceased_label_noise
        }
        OutcomeDesign::Prospective(law) => law.assignment_noise,
    };
    (0..N_CLASSES)
        .map(|k| if k == optimal { 1.0 - noise } else { noise / (N_CLASSES - 1) as f64 })
        .collect()
}

/// Draws one recorded treatment from [`assignment_probabilities`].
pub fn sample_assignment<R: Rng + ?Sized>(config: &CohortConfig, optimal: usize, rng: &mut R) -> usize {
    match &config.outcome {
        OutcomeDesign::Grouped => {
            let n = config.n_patients().max(1) as f64;
            let deceased = rng.random::<f64>() < config.n_deceased as f64 / n;
            if deceased {
                noisy_assignment(optimal, config.deceased_label_noise, rng)
            } else {
                optimal
            }
        }
        OutcomeDesign::Prospective(law) => noisy_assignment(optimal, law.assignment_noise, rng),
    }
}

/// Smallest assignment probability over all (optimal, recorded) pairs.
pub fn positivity_floor(config: &CohortConfig) -> f64 {
    (0..N_CLASSES)
        .flat_map(|opt| assignment_probabilities(config, opt))
        .fold(f64::INFINITY, f64::min)
}

struct World {
    structured: Vec<[f64; 2]>,
    notes: Vec<[f64; 2]>,
    statics: Vec<[f64; 2]>,
}

fn loading_rows(n: usize, norm: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| loop {
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            let len = (a * a + b * b).sqrt();
            if len > 1e-6 {
                break [a / len * norm, b / len * norm];
            }
        })
        .collect()
}

impl World {
    fn new(config: &CohortConfig) -> Self {
        let mut rng = rng_from(WORLD_SEED);
        Self {
            structured: loading_rows(config.d_struct, (1.0 - STRUCT_NOISE_VAR).sqrt(), &mut rng),
            notes: loading_rows(config.d_note, (1.0 - NOTE_NOISE_VAR).sqrt(), &mut rng),
            statics: loading_rows(config.d_static, 1.0, &mut rng),
        }
    }
}

fn emit(load: &[[f64; 2]], z: &[f64; 2], scale: f64, noise_sd: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    load.iter()
        .map(|a| {
            let e: f64 = StandardNormal.sample(rng);
            quantize(scale * (a[0] * z[0] + a[1] * z[1]) + noise_sd * e)
        })
        .collect()
}

fn latent_path(steps: usize, shift: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let innovation_sd = (1.0 - AR_COEF * AR_COEF).sqrt();
    let u = shift_axis();
    let mut eps = [0.0; 2];
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        for e in eps.iter_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *e = if t == 0 { n } else { AR_COEF * *e + innovation_sd * n };
        }
        let ramp = shift * (t + 1) as f64 / steps as f64;
        out.push([quantize(ramp * u[0] + eps[0]), quantize(ramp * u[1] + eps[1])]);
    }
    out
}

/// Draws a cohort. Identical configurations give identical cohorts.
pub fn generate_cohort(config: &CohortConfig) -> Result<Cohort> {
    config.validate()?;
    let world = World::new(config);
    let mut rng = rng_from(config.seed);
    let n = config.n_patients();
    let t_len = config.seq_len;

    let mut grouped_survival: Vec<bool> = Vec::new();
    if matches!(config.outcome, OutcomeDesign::Grouped) {
        grouped_survival = std::iter::repeat_n(true, config.n_survivors)
            .chain(std::iter::repeat_n(false, config.n_deceased))
            .collect();
        grouped_survival.shuffle(&mut rng);
    }

    let struct_sd = STRUCT_NOISE_VAR.sqrt();
    let note_sd = NOTE_NOISE_VAR.sqrt();
    let static_sd = (1.0 - STATIC_SIGNAL * STATIC_SIGNAL).sqrt();
    let width = n.to_string().len().max(4);

    let mut records = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("p{i:0width$}");
        let (latent, treatments, next_treatment, survived, death_risk) = match &config.outcome {
            OutcomeDesign::Grouped => {
                let survived = grouped_survival[i];
                let shift = if survived { 0.0 } else { config.latent_shift };
                let latent = latent_path(t_len, shift, &mut rng);
                let noise = if survived { 0.0 } else { config.deceased_label_noise };
                let treatments: Vec<usize> = latent
                    .iter()
                    .map(|z| noisy_assignment(optimal_treatment(z), noise, &mut rng))
                    .collect();
                let next = noisy_assignment(optimal_treatment(&latent[t_len - 1]), noise, &mut rng);
                (latent, treatments, next, survived, None)
            }
            OutcomeDesign::Prospective(law) => {
                let latent = latent_path(t_len, 0.0, &mut rng);
                let q = law.assignment_noise;
                let treatments: Vec<usize> = latent
                    .iter()
                    .map(|z| noisy_assignment(optimal_treatment(z), q, &mut rng))
                    .collect();
                let last = &latent[t_len - 1];
                let opt = optimal_treatment(last);
                let next = noisy_assignment(opt, q, &mut rng);
                let risk: Vec<f64> = law.risk_profile(last).into_iter().map(quantize).collect();
                let died = rng.random::<f64>() < risk[next];
                (latent, treatments, next, !died, Some(risk))
            }
        };

        let structured = latent
            .iter()
            .map(|z| emit(&world.structured, z, 1.0, struct_sd, &mut rng))
            .collect();
        let notes = latent
            .iter()
            .map(|z| emit(&world.notes, z, 1.0, note_sd, &mut rng))
            .collect();
        let static_features = emit(&world.statics, &latent[0], STATIC_SIGNAL, static_sd, &mut rng);

        truth.push(PatientTruth {
            optimal_treatments: latent.iter().map(|z| optimal_treatment(z)).collect(),
            optimal_next: optimal_treatment(&latent[t_len - 1]),
            latent,
            death_risk,
        });
        records.push(PatientRecord {
            id,
            structured,
            notes,
            static_features,
            treatments,
            next_treatment,
            survived,
        });
    }

    Ok(Cohort {
        config: config.clone(),
        records,
        truth: Some(truth),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub cal: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, cal: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    /// Sizes `(round(n·train), round(n·cal), remainder)`.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        let parts = [self.train, self.cal, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(SaferError::Split(format!("ratios must be non-negative, got {parts:?}")));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SaferError::Split(format!("ratios sum to {total}, expected 1")));
        }
        let n_train = (n as f64 * self.train).round() as usize;
        let n_cal = (n as f64 * self.cal).round() as usize;
        let n_test = n
            .checked_sub(n_train + n_cal)
            .ok_or_else(|| SaferError::Split(format!("ratios {parts:?} overflow {n} patients")))?;
        for (name, size) in [("train", n_train), ("calibration", n_cal), ("test", n_test)] {
            if size == 0 {
                return Err(SaferError::Split(format!("{name} split of {n} patients would be empty")));
            }
        }
        Ok((n_train, n_cal, n_test))
    }
}

/// Patient-level random partition into train, calibration and test cohorts.
pub fn split_cohort(cohort: &Cohort, ratios: SplitRatios, seed: u64) -> Result<(Cohort, Cohort, Cohort)> {
    let (n_train, n_cal, _) = ratios.sizes(cohort.len())?;
    let mut order: Vec<usize> = (0..cohort.len()).collect();
    order.shuffle(&mut rng_from(seed));
    let (train, rest) = order.split_at(n_train);
    let (cal, test) = rest.split_at(n_cal);
    Ok((cohort.subset(train), cohort.subset(cal), cohort.subset(test)))
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    cohort_config: &'a CohortConfig,
}

#[derive(Deserialize)]
struct HeaderIn {
    cohort_config: CohortConfig,
}

#[derive(Serialize)]
struct LineOut<'a> {
    #[serde(flatten)]
    record: &'a PatientRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth: Option<&'a PatientTruth>,
}

#[derive(Deserialize)]
struct LineIn {
    #[serde(flatten)]
    record: PatientRecord,
    #[serde(default)]
    truth: Option<PatientTruth>,
}

/// Writes the cohort as JSON lines: a configuration header, then one patient per line.
pub fn write_cohort_to<W: Write>(cohort: &Cohort, mut w: W) -> Result<()> {
    serde_json::to_writer(&mut w, &HeaderOut { cohort_config: &cohort.config })?;
    w.write_all(b"\n")?;
    for (i, record) in cohort.records.iter().enumerate() {
        let truth = cohort.truth.as_ref().map(|t| &t[i]);
        serde_json::to_writer(&mut w, &LineOut { record, truth })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cohort_from<R: Read>(r: R) -> Result<Cohort> {
    let parse = |line: usize, message: String| SaferError::Parse { line, message };
    let mut lines = BufReader::new(r).lines().enumerate();
    let config = loop {
        match lines.next() {
            None => return Err(parse(1, "missing cohort_config header".into())),
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let header: HeaderIn =
                    serde_json::from_str(&line).map_err(|e| parse(i + 1, e.to_string()))?;
                header.cohort_config.validate().map_err(|e| parse(i + 1, e.to_string()))?;
                break header.cohort_config;
            }
        }
    };

    let mut records = Vec::new();
    let mut truths = Vec::new();
    let mut with_truth = None;
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LineIn = serde_json::from_str(&line).map_err(|e| parse(i + 1, e.to_string()))?;
        parsed.record.check(&config).map_err(|m| parse(i + 1, m))?;
        match (with_truth, parsed.truth.is_some()) {
            (None, has) => with_truth = Some(has),
            (Some(a), b) if a != b => {
                return Err(parse(i + 1, "truth present on some lines but not others".into()))
            }
            _ => {}
        }
        if let Some(t) = parsed.truth {
            if t.latent.len() != config.seq_len || t.optimal_treatments.len() != config.seq_len {
                return Err(parse(i + 1, "truth length does not match seq_len".into()));
            }
            truths.push(t);
        }
        records.push(parsed.record);
    }
    Ok(Cohort {
        config,
        records,
        truth: with_truth.unwrap_or(false).then_some(truths),
    })
}

pub fn write_cohort(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    write_cohort_to(cohort, BufWriter::new(File::create(path)?))
}

pub fn read_cohort(path: impl AsRef<Path>) -> Result<Cohort> {
    read_cohort_from(File::open(path)?)
}
