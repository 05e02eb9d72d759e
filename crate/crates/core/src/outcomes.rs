//! Counterfactual mortality: a recurrent death-risk model over structured
//! features and treatments, and the plug-in mortality-reduction estimate for
//! a treatment recommender.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use safer_nn::{Bound, Matrix, ParamId, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaferError};
use crate::seeds::{derive_seed, rng_from};
use crate::stats::{mean, percentile_interval};
use crate::synthgen::{positivity_floor, Cohort, OutcomeDesign, PatientRecord, N_CLASSES};
use crate::training::{TrainConfig, TrainLog, Trainer};

pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OutcomeLayout {
    pub d_struct: usize,
    pub d_h: usize,
    pub w_f: ParamId,
    pub u_f: ParamId,
    pub b_f: ParamId,
    pub w_c: ParamId,
    pub u_c: ParamId,
    pub b_c: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Minimal gated recurrent unit with a sigmoid death-risk head.
///
/// `f = σ(x W_f + h U_f + b_f)`, `c = tanh(x W_c + h U_c + b_c)`,
/// `h' = h + f ⊙ (c − h)`.
#[derive(Clone, Debug)]
pub struct OutcomeModel {
    pub layout: OutcomeLayout,
    pub store: ParamStore,
    trained: bool,
}

/// Which treatments a counterfactual replaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SwapMode {
    /// Only the decision step after the observed window.
    #[default]
    FinalWindow,
    /// Every observed step and the decision step.
    StepWise,
}

impl OutcomeModel {
    pub fn init(d_struct: usize, d_h: usize, seed: u64) -> Result<Self> {
        if d_struct == 0 || d_h == 0 {
            return Err(SaferError::Config("outcome model widths must be at least 1".into()));
        }
        let d_in = d_struct + N_CLASSES;
        let mut rng = rng_from(seed);
        let mut s = ParamStore::new();
        let layout = OutcomeLayout {
            d_struct,
            d_h,
            w_f: s.add_glorot("mgu.w_f", d_in, d_h, &mut rng),
            u_f: s.add_glorot("mgu.u_f", d_h, d_h, &mut rng),
            b_f: s.add_zeros("mgu.b_f", 1, d_h),
            w_c: s.add_glorot("mgu.w_c", d_in, d_h, &mut rng),
            u_c: s.add_glorot("mgu.u_c", d_h, d_h, &mut rng),
            b_c: s.add_zeros("mgu.b_c", 1, d_h),
            head_w: s.add_glorot("head.w", d_h, 1, &mut rng),
            head_b: s.add_zeros("head.b", 1, 1),
        };
        Ok(Self {
            layout,
            store: s,
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Step inputs `structured_t ⊕ onehot(a_t)` followed by a decision step
    /// `0 ⊕ onehot(a_next)`; `swap` replaces treatments with `treatment`.
    pub fn inputs(&self, record: &PatientRecord, swap: Option<(SwapMode, usize)>) -> Result<Matrix> {
        let d = self.layout.d_struct;
        let t_len = record.seq_len();
        if t_len == 0 {
            return Err(SaferError::EmptySequence(format!("patient {} has no steps", record.id)));
        }
        let mut m = Matrix::zeros(t_len + 1, d + N_CLASSES);
        for (t, row) in record.structured.iter().enumerate() {
            if row.len() != d {
                return Err(SaferError::Precondition(format!(
                    "structured width {} does not match outcome model {d}",
                    row.len()
                )));
            }
            let a = match swap {
                Some((SwapMode::StepWise, a)) => a,
                _ => record.treatments[t],
            };
            m.row_mut(t)[..d].copy_from_slice(row);
            m.set(t, d + a, 1.0);
        }
        let next = swap.map_or(record.next_treatment, |(_, a)| a);
        if next >= N_CLASSES {
            return Err(SaferError::Precondition(format!("treatment {next} outside 0..{N_CLASSES}")));
        }
        m.set(t_len, d + next, 1.0);
        Ok(m)
    }

    /// Death probability for `record`, optionally under a substituted treatment.
    pub fn predict(&self, record: &PatientRecord, swap: Option<(SwapMode, usize)>) -> Result<f64> {
        let x = self.inputs(record, swap)?;
        let mut tape = Tape::new();
        let bound = tape.bind(&self.store, false);
        let logit = logit_on_tape(&mut tape, &bound, &self.layout, &x)?;
        Ok(safer_nn::sigmoid(tape.scalar(logit)))
    }
}

fn logit_on_tape(tape: &mut Tape, bound: &Bound, layout: &OutcomeLayout, x: &Matrix) -> Result<Var> {
    let mut h = tape.input(Matrix::zeros(1, layout.d_h));
    for t in 0..x.rows() {
        let xt = tape.input(Matrix::row_vector(x.row(t).to_vec()));
        let gate_x = tape.affine(xt, bound.get(layout.w_f), bound.get(layout.b_f))?;
        let gate_h = tape.matmul(h, bound.get(layout.u_f))?;
        let gate = tape.add(gate_x, gate_h)?;
        let f = tape.sigmoid(gate);
        let cand_x = tape.affine(xt, bound.get(layout.w_c), bound.get(layout.b_c))?;
        let cand_h = tape.matmul(h, bound.get(layout.u_c))?;
        let cand = tape.add(cand_x, cand_h)?;
        let c = tape.tanh(cand);
        let neg_h = tape.scale(h, -1.0);
        let delta = tape.add(c, neg_h)?;
        let step = tape.mul(f, delta)?;
        h = tape.add(h, step)?;
    }
    Ok(tape.affine(h, bound.get(layout.head_w), bound.get(layout.head_b))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutcomeTrainConfig {
    /// `epochs` is the upper bound when early stopping is active.
    pub train: TrainConfig,
    /// Share of records held out to pick the stopping epoch; `0` disables
    /// early stopping.
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for OutcomeTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 60,
                lr: 3e-3,
                ..TrainConfig::default()
            },
            validation_fraction: 0.1,
            patience: 5,
        }
    }
}

impl OutcomeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(SaferError::Config(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OutcomeTrainLog {
    pub train: TrainLog,
    /// Mean validation cross-entropy after each epoch; empty without a
    /// validation split.
    pub validation: Vec<f64>,
    /// Epoch whose parameters were kept (0 means the initial ones).
    pub best_epoch: usize,
}

fn mean_bce(model: &OutcomeModel, inputs: &[Matrix], targets: &[f64], idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &i in idx {
        let mut tape = Tape::new();
        let bound = tape.bind(&model.store, false);
        let z = logit_on_tape(&mut tape, &bound, &model.layout, &inputs[i])?;
        let loss = tape.binary_cross_entropy(z, targets[i])?;
        total += tape.scalar(loss);
    }
    Ok(total / idx.len() as f64)
}

/// Fits the death-risk model with binary cross-entropy on observed treatments,
/// keeping the parameters with the lowest validation loss.
pub fn train_outcome_model(
    records: &[PatientRecord],
    model0: &OutcomeModel,
    config: &OutcomeTrainConfig,
) -> Result<(OutcomeModel, OutcomeTrainLog)> {
    config.validate()?;
    let deaths = records.iter().filter(|r| !r.survived).count();
    if deaths == 0 || deaths == records.len() {
        return Err(SaferError::DegenerateTraining(format!(
            "outcome model needs both outcomes, got {deaths} deaths among {}",
            records.len()
        )));
    }
    let inputs = records
        .iter()
        .map(|r| model0.inputs(r, None))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<f64> = records.iter().map(|r| if r.survived { 0.0 } else { 1.0 }).collect();

    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng_from(derive_seed(config.train.seed, "validation")));
    let n_val = (records.len() as f64 * config.validation_fraction).round() as usize;
    let (val_idx, fit_idx) = order.split_at(n_val.min(records.len() - 1));
    let mut fit_idx = fit_idx.to_vec();
    fit_idx.sort_unstable();
    let mut val_idx = val_idx.to_vec();
    val_idx.sort_unstable();

    let mut model = model0.clone();
    let layout = model.layout;
    let mut trainer = Trainer::new(&model.store, &config.train)?;
    let mut log = OutcomeTrainLog::default();
    let mut best = if val_idx.is_empty() {
        None
    } else {
        Some((mean_bce(&model, &inputs, &targets, &val_idx)?, model.store.clone()))
    };
    for epoch in 1..=config.train.epochs {
        let e = trainer.epoch(&mut model.store, fit_idx.len(), |tape, bound, batch| {
            let w = 1.0 / batch.len() as f64;
            let mut terms = Vec::with_capacity(batch.len());
            for &b in batch {
                let i = fit_idx[b];
                let z = logit_on_tape(tape, bound, &layout, &inputs[i])?;
                terms.push((tape.binary_cross_entropy(z, targets[i])?, w));
            }
            Ok(tape.weighted_sum(&terms)?)
        })?;
        log.train.epochs.push(e);
        if let Some((best_loss, best_store)) = best.as_mut() {
            let v = mean_bce(&model, &inputs, &targets, &val_idx)?;
            log.validation.push(v);
            if v < *best_loss {
                *best_loss = v;
                *best_store = model.store.clone();
                log.best_epoch = epoch;
            } else if epoch - log.best_epoch >= config.patience.max(1) {
                break;
            }
        } else {
            log.best_epoch = epoch;
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    // zero epochs leaves the model untouched
    if config.train.epochs > 0 {
        recalibrate_intercept(&mut model, &inputs, &targets)?;
    }
    model.trained = true;
    Ok((model, log))
}

/// Shifts the head bias so the mean predicted risk over the training records
/// equals their observed death rate.
fn recalibrate_intercept(model: &mut OutcomeModel, inputs: &[Matrix], targets: &[f64]) -> Result<()> {
    let logits = inputs
        .par_iter()
        .map(|x| {
            let mut tape = Tape::new();
            let bound = tape.bind(&model.store, false);
            let z = logit_on_tape(&mut tape, &bound, &model.layout, x)?;
            Ok(tape.scalar(z))
        })
        .collect::<Result<Vec<f64>>>()?;
    let rate = mean(targets);
    let mut shift = 0.0;
    for _ in 0..50 {
        let (mut gap, mut slope) = (0.0, 0.0);
        for z in &logits {
            let p = safer_nn::sigmoid(z + shift);
            gap += p;
            slope += p * (1.0 - p);
        }
        gap = gap / logits.len() as f64 - rate;
        slope /= logits.len() as f64;
        if gap.abs() < 1e-12 || slope < 1e-12 {
            break;
        }
        shift -= gap / slope;
    }
    let b = model.store.get_mut(model.layout.head_b);
    b.set(0, 0, b.get(0, 0) + shift);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssumptionStatus {
    /// Holds by construction of the synthetic generator.
    Guaranteed,
    /// Cannot be checked from data and is assumed.
    Presumed,
    /// Known not to hold for this cohort.
    Violated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub id: String,
    pub name: String,
    pub status: AssumptionStatus,
    pub note: String,
}

/// Status of the identification assumptions for a cohort.
pub fn assumption_checklist(cohort: &Cohort) -> Vec<AssumptionCheck> {
    use AssumptionStatus::*;
    let synthetic = cohort.truth.is_some();
    let by_design = |ok: bool| if synthetic && ok { Guaranteed } else { Presumed };
    let prospective = matches!(cohort.config.outcome, OutcomeDesign::Prospective(_));
    let floor = positivity_floor(&cohort.config);
    let positivity = if !synthetic {
        Presumed
    } else if floor > 0.0 {
        Guaranteed
    } else {
        Violated
    };
    let item = |id: &str, name: &str, status, note: String| AssumptionCheck {
        id: id.into(),
        name: name.into(),
        status,
        note,
    };
    vec![
        item("B1", "No interference", by_design(true), "patients are generated independently".into()),
        item("B2", "No hidden variability", by_design(true), "each treatment class has one version".into()),
        item(
            "B3",
            "Ignorability",
            Presumed,
            if prospective {
                "assignment depends on the latent state, observed only through noisy features".into()
            } else {
                "recorded treatments depend on the outcome group".into()
            },
        ),
        item(
            "B4",
            "Positivity (Overlap)",
            positivity,
            format!("minimum assignment probability {floor:.3e}"),
        ),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CounterfactualConfig {
    pub swap: SwapMode,
    pub bootstrap: usize,
    pub seed: u64,
    /// Recommended classes seen fewer times than this among the cohort's
    /// decision-step treatments trigger a positivity warning.
    pub min_support: usize,
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        Self {
            swap: SwapMode::FinalWindow,
            bootstrap: 1000,
            seed: 0,
            min_support: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MortalityReport {
    pub observed_rate: f64,
    pub counterfactual_rate: f64,
    pub reduction: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Mean model prediction under the observed treatments.
    pub factual_rate: f64,
    pub n: usize,
    pub assumptions: Vec<AssumptionCheck>,
    pub warnings: Vec<String>,
}

impl MortalityReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "observed_rate,counterfactual_rate,reduction,ci_low,ci_high")?;
        writeln!(
            w,
            "{},{},{},{},{}",
            self.observed_rate, self.counterfactual_rate, self.reduction, self.ci_low, self.ci_high
        )?;
        Ok(())
    }
}

/// Observed mortality minus the model's mortality under the recommended
/// treatments, with a patient-level bootstrap interval.
pub fn counterfactual_mortality_reduction<F>(
    model: &OutcomeModel,
    cohort: &Cohort,
    recommender: F,
    config: &CounterfactualConfig,
) -> Result<MortalityReport>
where
    F: Fn(&PatientRecord) -> Result<usize> + Sync,
{
    if !model.is_trained() {
        return Err(SaferError::State("outcome model has not been trained".into()));
    }
    if cohort.is_empty() {
        return Err(SaferError::InsufficientData("cohort is empty".into()));
    }
    let per_patient = cohort
        .records
        .par_iter()
        .map(|r| {
            let a = recommender(r)?;
            let cf = model.predict(r, Some((config.swap, a)))?;
            let factual = model.predict(r, None)?;
            Ok((a, cf, factual))
        })
        .collect::<Result<Vec<_>>>()?;

    let died: Vec<f64> = cohort.records.iter().map(|r| if r.survived { 0.0 } else { 1.0 }).collect();
    let cf: Vec<f64> = per_patient.iter().map(|p| p.1).collect();
    let observed_rate = mean(&died);
    let counterfactual_rate = mean(&cf);
    let diffs: Vec<f64> = died.iter().zip(&cf).map(|(d, c)| d - c).collect();

    let n = diffs.len();
    let mut rng = rng_from(config.seed);
    let draws = (0..config.bootstrap.max(1))
        .map(|_| (0..n).map(|_| diffs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    let (ci_low, ci_high) = percentile_interval(draws, 0.05);

    let mut support = [0usize; N_CLASSES];
    for r in &cohort.records {
        support[r.next_treatment] += 1;
    }
    let mut thin: Vec<usize> = per_patient
        .iter()
        .map(|p| p.0)
        .filter(|&a| support[a] < config.min_support)
        .collect();
    thin.sort_unstable();
    thin.dedup();
    let mut warnings = Vec::new();
    if !thin.is_empty() {
        warnings.push(format!(
            "effective positivity: recommended classes {thin:?} were assigned fewer than {} times in the cohort",
            config.min_support
        ));
    }
    let assumptions = assumption_checklist(cohort);
    if let Some(b4) = assumptions.iter().find(|a| a.status == AssumptionStatus::Violated) {
        warnings.push(format!("{} ({}) does not hold: {}", b4.id, b4.name, b4.note));
    }

    Ok(MortalityReport {
        observed_rate,
        counterfactual_rate,
        reduction: observed_rate - counterfactual_rate,
        ci_low,
        ci_high,
        factual_rate: mean(&per_patient.iter().map(|p| p.2).collect::<Vec<_>>()),
        n,
        assumptions,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_cohort, CohortConfig};

    fn cohort() -> Cohort {
        generate_cohort(&CohortConfig {
            n_survivors: 12,
            n_deceased: 6,
            seq_len: 3,
            d_struct: 4,
            d_note: 2,
            d_static: 2,
            seed: 9,
            ..CohortConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn untrained_model_is_rejected() {
        let c = cohort();
        let m = OutcomeModel::init(4, 5, 0).unwrap();
        let r = counterfactual_mortality_reduction(&m, &c, |_| Ok(0), &CounterfactualConfig::default());
        assert!(matches!(r, Err(SaferError::State(_))));
    }

    #[test]
    fn single_class_is_degenerate() {
        let c = cohort().survivors();
        let m = OutcomeModel::init(4, 5, 0).unwrap();
        let r = train_outcome_model(&c.records, &m, &OutcomeTrainConfig::default());
        assert!(matches!(r, Err(SaferError::DegenerateTraining(_))));
    }

    #[test]
    fn zero_epochs_keeps_parameters() {
        let c = cohort();
        let m = OutcomeModel::init(4, 5, 0).unwrap();
        let (out, _) = train_outcome_model(&c.records, &m, &OutcomeTrainConfig { train: TrainConfig { epochs: 0, ..TrainConfig::default() }, ..OutcomeTrainConfig::default() }).unwrap();
        assert_eq!(out.store.max_abs_diff(&m.store), 0.0);
    }

    #[test]
    fn inputs_layout_and_swaps() {
        let c = cohort();
        let m = OutcomeModel::init(4, 5, 0).unwrap();
        let r = &c.records[0];
        let x = m.inputs(r, None).unwrap();
        assert_eq!(x.shape(), (4, 4 + N_CLASSES));
        assert_eq!(x.get(3, 4 + r.next_treatment), 1.0);
        assert_eq!(&x.row(3)[..4], &[0.0; 4]);
        let fin = m.inputs(r, Some((SwapMode::FinalWindow, 7))).unwrap();
        assert_eq!(fin.get(3, 4 + 7), 1.0);
        assert_eq!(fin.row(0), x.row(0));
        let all = m.inputs(r, Some((SwapMode::StepWise, 7))).unwrap();
        assert!((0..4).all(|t| all.get(t, 4 + 7) == 1.0));
    }

    #[test]
    fn checklist_marks_positivity() {
        let c = cohort();
        let list = assumption_checklist(&c);
        assert_eq!(list.len(), 4);
        assert_eq!(list[3].status, AssumptionStatus::Guaranteed);
        let mut clean = c.clone();
        clean.config.deceased_label_noise = 0.0;
        assert_eq!(assumption_checklist(&clean)[3].status, AssumptionStatus::Violated);
    }
}
