//! `safer`: command-line driver for the uncertainty-aware recommendation pipeline.

mod grid;
mod manifest;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use safer_core::conformal::{bh_select, conformal_pvalue, tie_break, CalRecord, ConformalPool, ScorePredictor};
use safer_core::metrics::EvalSubset;
use safer_core::pipeline::{
    calibrate, case_study, evaluate_model, fit_finetune, fit_outcome, fit_student, fit_teacher, mortality, sweep,
    PipelineConfig, Splits,
};
use safer_core::synthgen::{generate_cohort, read_cohort, split_cohort, write_cohort, Cohort};
use safer_core::teacher::FusionParams;
use safer_core::training::TrainLog;
use safer_core::uncertainty::{write_uncertainty_csv, MinMax, ModelPair, StudentParams};
use serde::{Deserialize, Serialize};

use grid::{parse_grid, parse_windows};
use manifest::{digests, manifest_path, RunManifest};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "safer", version, about = "Uncertainty-aware treatment recommendation with conformal selection")]
struct Cli {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for replicate-level parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a cohort into train, calibration and test files.
    Split {
        #[arg(long)]
        cohort: PathBuf,
        /// Output directory for train.jsonl, cal.jsonl and test.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the fusion teacher.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the survivor-only student on teacher embeddings.
    Student {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Risk-aware fine-tuning of the teacher.
    Finetune {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score all splits and fit the uncertainty-score predictor.
    Calibrate {
        #[command(flatten)]
        models: Models,
        /// Directory written by `split`.
        #[arg(long)]
        splits: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Conformal selection of confident test patients at one level.
    Select {
        /// `calibration.json` written by `calibrate`.
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        c: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo FDR and power over an (alpha, c) grid.
    Sweep {
        #[arg(long)]
        calibration: PathBuf,
        /// `start:stop:step` or a comma list.
        #[arg(long)]
        alphas: Option<String>,
        #[arg(long)]
        cs: Option<String>,
        #[arg(long)]
        reps: Option<usize>,
        /// Output directory for sweep.csv and guarantee.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Ranking metrics and counterfactual mortality reduction.
    Eval {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long, value_enum, default_value_t = Subset::Survivors)]
        subset: Subset,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean uncertainty per observation window for survivors and deceased patients.
    CaseStudy {
        #[command(flatten)]
        models: Models,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, default_value_t = 10)]
        survivors: usize,
        #[arg(long, default_value_t = 10)]
        deceased: usize,
        /// Window lengths, `start:stop[:step]` or a comma list (default: every prefix).
        #[arg(long)]
        windows: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct Models {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    student: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Subset {
    Survivors,
    All,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen { .. } => "gen",
            Command::Split { .. } => "split",
            Command::Train { .. } => "train",
            Command::Student { .. } => "student",
            Command::Finetune { .. } => "finetune",
            Command::Calibrate { .. } => "calibrate",
            Command::Select { .. } => "select",
            Command::Sweep { .. } => "sweep",
            Command::Eval { .. } => "eval",
            Command::CaseStudy { .. } => "case-study",
        }
    }
}

/// Serialized output of `calibrate`, input of `select` and `sweep`.
#[derive(Debug, Serialize, Deserialize)]
struct CalibrationFile {
    clip: f64,
    normalizer: MinMax,
    predictor: ScorePredictor,
    n_cal: usize,
    /// Calibration patients first, then test patients.
    patient_ids: Vec<String>,
    pool: ConformalPool,
}

struct Outputs {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    let seed = cfg.seed;
    Ok(cfg.with_master_seed(seed))
}

fn seed_override() -> std::result::Result<Option<u64>, String> {
    match std::env::var("SAFER_SEED") {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| format!("SAFER_SEED must be an unsigned integer, got {v:?}")),
        Err(_) => Ok(None),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> safer_core::Result<()>,
{
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn read(path: &Path) -> Result<Cohort> {
    read_cohort(path).with_context(|| format!("reading cohort {}", path.display()))
}

fn split_files(dir: &Path) -> [PathBuf; 3] {
    ["train", "cal", "test"].map(|s| dir.join(format!("{s}.jsonl")))
}

fn concat(parts: &[&Cohort]) -> Cohort {
    let truth = parts
        .iter()
        .map(|c| c.truth.clone())
        .collect::<Option<Vec<_>>>()
        .map(|t| t.concat());
    Cohort {
        config: parts[0].config.clone(),
        records: parts.iter().flat_map(|c| c.records.iter().cloned()).collect(),
        truth,
    }
}

fn read_splits(dir: &Path) -> Result<Splits> {
    let [train, cal, test] = split_files(dir);
    let (train, cal, test) = (read(&train)?, read(&cal)?, read(&test)?);
    Ok(Splits {
        full: concat(&[&train, &cal, &test]),
        train,
        cal,
        test,
    })
}

fn read_teacher(path: &Path) -> Result<FusionParams> {
    FusionParams::read_checkpoint(path).with_context(|| format!("reading teacher {}", path.display()))
}

fn read_student(path: &Path, cfg: &PipelineConfig) -> Result<StudentParams> {
    StudentParams::read_checkpoint(path, cfg.model.student_decay)
        .with_context(|| format!("reading student {}", path.display()))
}

fn write_log(path: Option<&PathBuf>, log: &TrainLog, outputs: &mut Vec<PathBuf>) -> Result<()> {
    if let Some(p) = path {
        write_with(p, |w| log.write_csv(w))?;
        outputs.push(p.clone());
    }
    Ok(())
}

fn run(command: &Command, cfg: &PipelineConfig) -> Result<Outputs> {
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    match command {
        Command::Gen { out } => {
            let cohort = generate_cohort(&cfg.cohort)?;
            write_cohort(&cohort, out)?;
            outputs.push(out.clone());
        }
        Command::Split { cohort, out } => {
            let full = read(cohort)?;
            inputs.push(cohort.clone());
            let (train, cal, test) = split_cohort(&full, cfg.split, cfg.split_seed())?;
            fs::create_dir_all(out)?;
            for (part, path) in [train, cal, test].iter().zip(split_files(out)) {
                write_cohort(part, &path)?;
                outputs.push(path);
            }
        }
        Command::Train { train, out, log } => {
            let records = read(train)?.records;
            inputs.push(train.clone());
            let (teacher, tlog) = fit_teacher(&records, cfg)?;
            teacher.write_checkpoint(out)?;
            outputs.push(out.clone());
            write_log(log.as_ref(), &tlog, &mut outputs)?;
        }
        Command::Student { train, teacher, out, log } => {
            let records = read(train)?.records;
            let t = read_teacher(teacher)?;
            inputs.extend([train.clone(), teacher.clone()]);
            let (student, slog) = fit_student(&t, &records, cfg)?;
            student.write_checkpoint(out)?;
            outputs.push(out.clone());
            write_log(log.as_ref(), &slog, &mut outputs)?;
        }
        Command::Finetune { train, teacher, student, out, log } => {
            let records = read(train)?.records;
            let t = read_teacher(teacher)?;
            let s = read_student(student, cfg)?;
            inputs.extend([train.clone(), teacher.clone(), student.clone()]);
            let (tuned, flog) = fit_finetune(&t, &s, &records, cfg)?;
            tuned.write_checkpoint(out)?;
            outputs.push(out.clone());
            write_log(log.as_ref(), &TrainLog { epochs: flog.epochs }, &mut outputs)?;
        }
        Command::Calibrate { models, splits, out } => {
            let parts = read_splits(splits)?;
            let teacher = read_teacher(&models.teacher)?;
            let student = read_student(&models.student, cfg)?;
            inputs.extend(split_files(splits));
            inputs.extend([models.teacher.clone(), models.student.clone()]);
            let pair = ModelPair { teacher: &teacher, student: &student };
            let cal = calibrate(pair, &parts, &cfg.conformal)?;
            fs::create_dir_all(out)?;
            let file = CalibrationFile {
                clip: cal.clip,
                normalizer: cal.normalizer,
                predictor: cal.predictor.clone(),
                n_cal: cal.n_cal,
                patient_ids: parts.cal.records.iter().chain(&parts.test.records).map(|r| r.id.clone()).collect(),
                pool: cal.pool.clone(),
            };
            let path = out.join("calibration.json");
            write_json(&path, &file)?;
            outputs.push(path);
            for (name, records) in [
                ("train", &cal.train_records),
                ("cal", &cal.cal_records),
                ("test", &cal.test_records),
            ] {
                let path = out.join(format!("uncertainty_{name}.csv"));
                write_with(&path, |w| write_uncertainty_csv(records, w))?;
                outputs.push(path);
            }
        }
        Command::Select { calibration, alpha, c, out } => {
            let file = read_calibration(calibration)?;
            inputs.push(calibration.clone());
            let pool = &file.pool;
            let cal: Vec<CalRecord> = (0..file.n_cal)
                .map(|i| CalRecord::new(pool.kappa_true[i], pool.kappa_pred[i], *c))
                .collect();
            let test: Vec<usize> = (file.n_cal..pool.len()).collect();
            let p: Vec<f64> = test
                .iter()
                .enumerate()
                .map(|(j, &i)| conformal_pvalue(&cal, pool.kappa_pred[i], tie_break(cfg.conformal.seed, 0, j)))
                .collect();
            let sel = bh_select(&p, *alpha)?;
            let mut w = create(out)?;
            writeln!(w, "patient_id,kappa_pred,p_value,selected,kappa_true")?;
            for (j, &i) in test.iter().enumerate() {
                let chosen = sel.selected.binary_search(&j).is_ok();
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    file.patient_ids[i], pool.kappa_pred[i], p[j], chosen as u8, pool.kappa_true[i]
                )?;
            }
            w.flush()?;
            outputs.push(out.clone());
        }
        Command::Sweep { calibration, alphas, cs, reps, out } => {
            let mut conformal = cfg.conformal.clone();
            if let Some(a) = alphas {
                conformal.alphas = parse_grid(a).map_err(usage)?;
            }
            if let Some(c) = cs {
                conformal.cs = parse_grid(c).map_err(usage)?;
            }
            if let Some(r) = reps {
                conformal.replicates = *r;
            }
            let file = read_calibration(calibration)?;
            inputs.push(calibration.clone());
            let cal = safer_core::pipeline::Calibration {
                predictor: file.predictor,
                clip: file.clip,
                normalizer: file.normalizer,
                pool: file.pool,
                n_cal: file.n_cal,
                train_records: Vec::new(),
                cal_records: Vec::new(),
                test_records: Vec::new(),
            };
            let grid = sweep(&cal, &conformal)?;
            fs::create_dir_all(out)?;
            let (curve, guarantee) = (out.join("sweep.csv"), out.join("guarantee.csv"));
            write_with(&curve, |w| grid.write_csv(w))?;
            write_with(&guarantee, |w| grid.write_guarantee_csv(w))?;
            outputs.extend([curve, guarantee]);
        }
        Command::Eval { teacher, splits, subset, out } => {
            let parts = read_splits(splits)?;
            let t = read_teacher(teacher)?;
            inputs.extend(split_files(splits));
            inputs.push(teacher.clone());
            let (outcome, _) = fit_outcome(&parts.train.records, cfg)?;
            let subset = match subset {
                Subset::Survivors => EvalSubset::Survivors,
                Subset::All => EvalSubset::All,
            };
            let report = evaluate_model(&t, &parts.test, subset, &outcome, &parts.full, cfg)?;
            let mort = mortality(&t, &outcome, &parts.full, cfg)?;
            for warning in &mort.warnings {
                eprintln!("warning: {warning}");
            }
            fs::create_dir_all(out)?;
            let paths = [
                out.join("metrics.json"),
                out.join("metrics.csv"),
                out.join("mortality.json"),
                out.join("mortality.csv"),
            ];
            write_with(&paths[0], |w| report.write_json(w))?;
            write_with(&paths[1], |w| report.write_csv(w))?;
            write_json(&paths[2], &mort)?;
            write_with(&paths[3], |w| mort.write_csv(w))?;
            outputs.extend(paths);
        }
        Command::CaseStudy { models, cohort, survivors, deceased, windows, out } => {
            let requested = windows.as_deref().map(parse_windows).transpose().map_err(usage)?;
            let c = read(cohort)?;
            let teacher = read_teacher(&models.teacher)?;
            let student = read_student(&models.student, cfg)?;
            inputs.extend([cohort.clone(), models.teacher.clone(), models.student.clone()]);
            let windows = match requested {
                Some(w) => w,
                None => {
                    let t = c.records.iter().map(|r| r.seq_len()).min().unwrap_or(0);
                    (1..=t).collect()
                }
            };
            let pair = ModelPair { teacher: &teacher, student: &student };
            let study = case_study(pair, &c, *survivors, *deceased, &windows)?;
            write_with(out, |w| study.write_csv(w))?;
            outputs.push(out.clone());
        }
    }
    Ok(Outputs { inputs, outputs })
}

fn read_calibration(path: &Path) -> Result<CalibrationFile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: CalibrationFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if file.pool.len() != file.patient_ids.len() || file.n_cal == 0 || file.n_cal >= file.pool.len() {
        bail!("{} is inconsistent", path.display());
    }
    Ok(file)
}

/// Marks an error as a usage error.
#[derive(Debug)]
struct Usage(anyhow::Error);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: anyhow::Error) -> anyhow::Error {
    Usage(e).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let seed = match seed_override() {
        Ok(s) => s,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    match execute(&cli, seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}

fn execute(cli: &Cli, seed: Option<u64>) -> Result<()> {
    let start = Instant::now();
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(s) = seed {
        cfg = cfg.with_master_seed(s);
    }
    cfg.validate()?;
    let Outputs { mut inputs, outputs } = run(&cli.command, &cfg)?;
    if let Some(c) = &cli.config {
        inputs.insert(0, c.clone());
    }
    let primary = match &cli.command {
        Command::Gen { out }
        | Command::Split { out, .. }
        | Command::Train { out, .. }
        | Command::Student { out, .. }
        | Command::Finetune { out, .. }
        | Command::Calibrate { out, .. }
        | Command::Select { out, .. }
        | Command::Sweep { out, .. }
        | Command::Eval { out, .. }
        | Command::CaseStudy { out, .. } => out.clone(),
    };
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        argv: std::env::args().collect(),
        seed: cfg.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: serde_json::to_value(&cfg)?,
        inputs: digests(&inputs)?,
        outputs: digests(&outputs)?,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    let path = manifest_path(&primary);
    manifest.write(&path)?;
    println!("{}", path.display());
    Ok(())
}
