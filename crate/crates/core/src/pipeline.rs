//! End-to-end orchestration from one configuration and one master seed.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::conformal::{
    clip_bound, default_alphas, default_cs, estimate_fdr_power, fit_score_predictor, ConformalPool, RidgeConfig,
    ScorePredictor, SweepConfig, SweepGrid,
};
use crate::error::{Result, SaferError};
use crate::metrics::{EvalSubset, MetricsReport};
use crate::outcomes::{
    counterfactual_mortality_reduction, train_outcome_model, CounterfactualConfig, MortalityReport, OutcomeModel,
    OutcomeTrainConfig, OutcomeTrainLog,
    DEFAULT_HIDDEN,
};
use crate::seeds::derive_seed;
use crate::stats::mean;
use crate::synthgen::{generate_cohort, split_cohort, Cohort, CohortConfig, PatientRecord, SplitRatios};
use crate::teacher::{encode_patient, run_teacher, train_teacher, FusionDims, FusionParams};
use crate::training::{TrainConfig, TrainLog};
use crate::uncertainty::{
    risk_aware_finetune, train_student, uncertainty_records, uncertainty_trajectory, FinetuneConfig, FinetuneLog,
    MinMax, ModelPair, StudentExample, StudentParams, UncertaintyRecord, DEFAULT_STUDENT_DECAY,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_k: usize,
    /// Student hidden width; `0` means `d_k`.
    pub student_hidden: usize,
    pub student_decay: f64,
    pub outcome_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_k: 128,
            student_hidden: 0,
            student_decay: DEFAULT_STUDENT_DECAY,
            outcome_hidden: DEFAULT_HIDDEN,
        }
    }
}

/// Which patients the uncertainty-score regression is fitted on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictorScope {
    /// Training patients; applied to calibration and test.
    #[default]
    Train,
    /// Calibration and test patients. This uses test scores and is kept only
    /// for comparison.
    CalTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConformalConfig {
    pub ridge: RidgeConfig,
    pub scope: PredictorScope,
    /// Quantile of training scores used as the clip bound `M`.
    pub clip_quantile: f64,
    pub alphas: Vec<f64>,
    pub cs: Vec<f64>,
    pub replicates: usize,
    pub guarantee_levels: Vec<f64>,
    pub seed: u64,
}

impl Default for ConformalConfig {
    fn default() -> Self {
        Self {
            ridge: RidgeConfig::default(),
            scope: PredictorScope::Train,
            clip_quantile: 0.999,
            alphas: default_alphas(),
            cs: default_cs(),
            replicates: 500,
            guarantee_levels: default_alphas(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutcomeConfig {
    pub train: OutcomeTrainConfig,
    pub counterfactual: CounterfactualConfig,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub cohort: CohortConfig,
    pub split: SplitRatios,
    pub model: ModelConfig,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    pub finetune: FinetuneConfig,
    pub conformal: ConformalConfig,
    pub outcome: OutcomeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cohort: CohortConfig::default(),
            split: SplitRatios::default(),
            model: ModelConfig::default(),
            teacher: TrainConfig {
                epochs: 30,
                lr: 1e-3,
                batch_size: 32,
                seed: 0,
                weight_decay: 1e-2,
            },
            student: TrainConfig {
                epochs: 30,
                lr: 1e-3,
                batch_size: 32,
                seed: 0,
                weight_decay: DEFAULT_STUDENT_DECAY,
            },
            finetune: FinetuneConfig::default(),
            conformal: ConformalConfig::default(),
            outcome: OutcomeConfig::default(),
        }
        .with_master_seed(0)
    }
}

impl PipelineConfig {
    /// Sets `seed` and re-derives every stage seed from it.
    pub fn with_master_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.cohort.seed = derive_seed(seed, "cohort");
        self.teacher.seed = derive_seed(seed, "teacher");
        self.student.seed = derive_seed(seed, "student");
        self.finetune.train.seed = derive_seed(seed, "finetune");
        self.conformal.seed = derive_seed(seed, "conformal");
        self.outcome.train.train.seed = derive_seed(seed, "outcome");
        self.outcome.counterfactual.seed = derive_seed(seed, "counterfactual");
        self
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "split")
    }

    pub fn init_seed(&self, part: &str) -> u64 {
        derive_seed(self.seed, &format!("init/{part}"))
    }

    pub fn fusion_dims(&self) -> FusionDims {
        FusionDims {
            d_struct: self.cohort.d_struct,
            d_note: self.cohort.d_note,
            d_static: self.cohort.d_static,
            d_k: self.model.d_k,
        }
    }

    pub fn student_hidden(&self) -> usize {
        if self.model.student_hidden == 0 {
            self.model.d_k
        } else {
            self.model.student_hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.split.sizes(self.cohort.n_patients())?;
        for t in [&self.teacher, &self.student, &self.finetune.train] {
            t.validate()?;
        }
        self.outcome.train.validate()?;
        if !(0.0..=1.0).contains(&self.conformal.clip_quantile) {
            return Err(SaferError::Config("clip_quantile must lie in [0, 1]".into()));
        }
        if self.conformal.alphas.is_empty() || self.conformal.cs.is_empty() {
            return Err(SaferError::Config("alpha and c grids must be non-empty".into()));
        }
        Ok(())
    }
}

/// Generated cohort and its patient-level split.
#[derive(Clone, Debug)]
pub struct Splits {
    pub full: Cohort,
    pub train: Cohort,
    pub cal: Cohort,
    pub test: Cohort,
}

pub fn make_splits(config: &PipelineConfig) -> Result<Splits> {
    let full = generate_cohort(&config.cohort)?;
    let (train, cal, test) = split_cohort(&full, config.split, config.split_seed())?;
    Ok(Splits { full, train, cal, test })
}

pub fn fit_teacher(train: &[PatientRecord], config: &PipelineConfig) -> Result<(FusionParams, TrainLog)> {
    let p0 = FusionParams::init(config.fusion_dims(), config.init_seed("teacher"))?;
    train_teacher(train, &p0, &config.teacher)
}

/// Student trained on the survivors' embeddings under `teacher`.
pub fn fit_student(
    teacher: &FusionParams,
    train: &[PatientRecord],
    config: &PipelineConfig,
) -> Result<(StudentParams, TrainLog)> {
    let examples = train
        .iter()
        .filter(|r| r.survived)
        .map(|r| {
            Ok(StudentExample {
                embedding: encode_patient(r, teacher)?,
                label: r.next_treatment,
                survived: true,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let s0 = StudentParams::init(
        teacher.dims().embedding_dim(),
        config.student_hidden(),
        config.model.student_decay,
        config.init_seed("student"),
    )?;
    train_student(&examples, &s0, &config.student)
}

pub fn fit_finetune(
    teacher: &FusionParams,
    student: &StudentParams,
    train: &[PatientRecord],
    config: &PipelineConfig,
) -> Result<(FusionParams, FinetuneLog)> {
    let initial = uncertainty_records(ModelPair { teacher, student }, train, None)?;
    risk_aware_finetune(teacher, student, train, &initial, &config.finetune)
}

/// Everything the conformal stage needs, fitted from a model pair.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub predictor: ScorePredictor,
    pub clip: f64,
    pub normalizer: MinMax,
    pub pool: ConformalPool,
    pub n_cal: usize,
    pub train_records: Vec<UncertaintyRecord>,
    pub cal_records: Vec<UncertaintyRecord>,
    pub test_records: Vec<UncertaintyRecord>,
}

pub fn calibrate(pair: ModelPair<'_>, splits: &Splits, config: &ConformalConfig) -> Result<Calibration> {
    let train = pair.score_all(&splits.train.records)?;
    let cal = pair.score_all(&splits.cal.records)?;
    let test = pair.score_all(&splits.test.records)?;
    let train_k: Vec<f64> = train.iter().map(|s| s.kappa).collect();
    let clip = clip_bound(&train_k, config.clip_quantile)?;
    let normalizer = MinMax::fit(&train_k)?;

    let (features, targets): (Vec<Vec<f64>>, Vec<f64>) = match config.scope {
        PredictorScope::Train => train.iter().map(|s| (s.h.clone(), s.kappa.min(clip))).unzip(),
        PredictorScope::CalTest => cal.iter().chain(&test).map(|s| (s.h.clone(), s.kappa.min(clip))).unzip(),
    };
    let predictor = fit_score_predictor(&features, &targets, config.ridge)?;

    let held = cal.iter().chain(&test);
    let pool = ConformalPool {
        kappa_true: held.clone().map(|s| s.kappa.min(clip)).collect(),
        kappa_pred: held.map(|s| predictor.predict(&s.h).clamp(0.0, clip)).collect(),
    };
    let records = |cohort: &Cohort, scores: &[crate::uncertainty::PatientScore]| {
        cohort
            .records
            .iter()
            .zip(scores)
            .map(|(r, s)| UncertaintyRecord {
                patient_id: r.id.clone(),
                kappa: s.kappa,
                kappa_hat: normalizer.apply(s.kappa),
                survived: r.survived,
            })
            .collect::<Vec<_>>()
    };
    Ok(Calibration {
        train_records: records(&splits.train, &train),
        cal_records: records(&splits.cal, &cal),
        test_records: records(&splits.test, &test),
        predictor,
        clip,
        normalizer,
        pool,
        n_cal: splits.cal.len(),
    })
}

pub fn sweep(calibration: &Calibration, config: &ConformalConfig) -> Result<SweepGrid> {
    estimate_fdr_power(
        &calibration.pool,
        &SweepConfig {
            alphas: config.alphas.clone(),
            cs: config.cs.clone(),
            replicates: config.replicates,
            n_cal: calibration.n_cal,
            seed: config.seed,
            guarantee_levels: config.guarantee_levels.clone(),
        },
    )
}

/// Index of the most probable treatment.
pub fn recommend(teacher: &FusionParams, record: &PatientRecord) -> Result<usize> {
    let p = run_teacher(record, teacher)?.probs;
    Ok(argmax(&p))
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn fit_outcome(train: &[PatientRecord], config: &PipelineConfig) -> Result<(OutcomeModel, OutcomeTrainLog)> {
    let m0 = OutcomeModel::init(config.cohort.d_struct, config.model.outcome_hidden, config.init_seed("outcome"))?;
    train_outcome_model(train, &m0, &config.outcome.train)
}

pub fn mortality(
    teacher: &FusionParams,
    outcome: &OutcomeModel,
    cohort: &Cohort,
    config: &PipelineConfig,
) -> Result<MortalityReport> {
    counterfactual_mortality_reduction(
        outcome,
        cohort,
        |r| recommend(teacher, r),
        &config.outcome.counterfactual,
    )
}

/// Ranking metrics on `eval` (filtered to `subset`) plus the mortality
/// reduction over `full`.
pub fn evaluate_model(
    teacher: &FusionParams,
    eval: &Cohort,
    subset: EvalSubset,
    outcome: &OutcomeModel,
    full: &Cohort,
    config: &PipelineConfig,
) -> Result<MetricsReport> {
    let records: Vec<&PatientRecord> = eval
        .records
        .iter()
        .filter(|r| subset == EvalSubset::All || r.survived)
        .collect();
    if records.is_empty() {
        return Err(SaferError::InsufficientData("evaluation subset is empty".into()));
    }
    let scores = records
        .iter()
        .map(|r| Ok(run_teacher(r, teacher)?.probs))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = records.iter().map(|r| r.next_treatment).collect();
    let reduction = mortality(teacher, outcome, full, config)?.reduction;
    MetricsReport::from_scores(&scores, &labels, reduction)
}

/// Mean uncertainty per prefix window for the two outcome groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseStudy {
    pub windows: Vec<usize>,
    pub survivor_mean: Vec<f64>,
    pub deceased_mean: Vec<f64>,
    pub n_survivors: usize,
    pub n_deceased: usize,
}

impl CaseStudy {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "window,survivor_mean_kappa,deceased_mean_kappa")?;
        for (i, win) in self.windows.iter().enumerate() {
            writeln!(w, "{},{},{}", win, self.survivor_mean[i], self.deceased_mean[i])?;
        }
        Ok(())
    }
}

/// Trajectories of the first `n_survivors` survivors and `n_deceased`
/// deceased patients of `cohort`, averaged per window.
pub fn case_study(
    pair: ModelPair<'_>,
    cohort: &Cohort,
    n_survivors: usize,
    n_deceased: usize,
    windows: &[usize],
) -> Result<CaseStudy> {
    let pick = |survived: bool, n: usize| -> Vec<&PatientRecord> {
        cohort.records.iter().filter(|r| r.survived == survived).take(n).collect()
    };
    let alive = pick(true, n_survivors);
    let dead = pick(false, n_deceased);
    if alive.is_empty() || dead.is_empty() {
        return Err(SaferError::InsufficientData("case study needs both outcome groups".into()));
    }
    let curve = |group: &[&PatientRecord]| -> Result<Vec<f64>> {
        let trajectories = group
            .iter()
            .map(|r| uncertainty_trajectory(r, pair, windows))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..windows.len())
            .map(|w| mean(&trajectories.iter().map(|t| t[w].1).collect::<Vec<_>>()))
            .collect())
    };
    Ok(CaseStudy {
        windows: windows.to_vec(),
        survivor_mean: curve(&alive)?,
        deceased_mean: curve(&dead)?,
        n_survivors: alive.len(),
        n_deceased: dead.len(),
    })
}

/// All artifacts of one full run.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub splits: Splits,
    pub teacher: FusionParams,
    pub teacher_log: TrainLog,
    pub student: StudentParams,
    pub student_log: TrainLog,
    pub finetuned: FusionParams,
    pub finetune_log: FinetuneLog,
    pub calibration: Calibration,
    pub sweep: SweepGrid,
    pub outcome: OutcomeModel,
    pub metrics: MetricsReport,
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineRun> {
    config.validate()?;
    let splits = make_splits(config)?;
    let (teacher, teacher_log) = fit_teacher(&splits.train.records, config)?;
    let (student, student_log) = fit_student(&teacher, &splits.train.records, config)?;
    let (finetuned, finetune_log) = fit_finetune(&teacher, &student, &splits.train.records, config)?;
    let pair = ModelPair {
        teacher: &finetuned,
        student: &student,
    };
    let calibration = calibrate(pair, &splits, &config.conformal)?;
    let sweep = sweep(&calibration, &config.conformal)?;
    let (outcome, _) = fit_outcome(&splits.train.records, config)?;
    let metrics = evaluate_model(&finetuned, &splits.test, EvalSubset::Survivors, &outcome, &splits.full, config)?;
    Ok(PipelineRun {
        splits,
        teacher,
        teacher_log,
        student,
        student_log,
        finetuned,
        finetune_log,
        calibration,
        sweep,
        outcome,
        metrics,
    })
}
