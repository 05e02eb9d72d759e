//! The fusion teacher: per-modality causal self-attention, bidirectional
//! cross-attention, a static-feature embedding and a one-hidden-layer head.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use safer_nn::{
    causal_mask, cross_attention, masked_self_attention, sinusoidal_pe, AttentionParams, Bound,
    Matrix, ParamId, ParamStore, Tape, Var,
};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaferError};
use crate::seeds::rng_from;
use crate::synthgen::{PatientRecord, N_CLASSES};
use crate::training::{TrainConfig, TrainLog, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionDims {
    pub d_struct: usize,
    pub d_note: usize,
    pub d_static: usize,
    pub d_k: usize,
}

impl FusionDims {
    pub fn embedding_dim(&self) -> usize {
        3 * self.d_k
    }

    fn validate(&self) -> Result<()> {
        if self.d_k == 0 || !self.d_k.is_multiple_of(2) {
            return Err(SaferError::Config(format!("d_k must be positive and even, got {}", self.d_k)));
        }
        if self.d_struct == 0 || self.d_note == 0 || self.d_static == 0 {
            return Err(SaferError::Config("input dimensions must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parameter handles of the teacher, in registration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionIds {
    pub embed_e_w: ParamId,
    pub embed_e_b: ParamId,
    pub embed_o_w: ParamId,
    pub embed_o_b: ParamId,
    pub self_e: AttentionParams,
    pub self_o: AttentionParams,
    pub cross_e: AttentionParams,
    pub cross_o: AttentionParams,
    pub static_w: ParamId,
    pub static_b: ParamId,
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionLayout {
    pub dims: FusionDims,
    pub ids: FusionIds,
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub layout: FusionLayout,
    pub store: ParamStore,
}

fn register(dims: FusionDims, seed: u64) -> (FusionIds, ParamStore) {
    let mut rng = rng_from(seed);
    let mut s = ParamStore::new();
    let d_k = dims.d_k;
    let ids = FusionIds {
        embed_e_w: s.add_glorot("embed_e.w", dims.d_struct, d_k, &mut rng),
        embed_e_b: s.add_zeros("embed_e.b", 1, d_k),
        embed_o_w: s.add_glorot("embed_o.w", dims.d_note, d_k, &mut rng),
        embed_o_b: s.add_zeros("embed_o.b", 1, d_k),
        self_e: AttentionParams::register(&mut s, "self_e", d_k, d_k, &mut rng),
        self_o: AttentionParams::register(&mut s, "self_o", d_k, d_k, &mut rng),
        cross_e: AttentionParams::register(&mut s, "cross_e", d_k, d_k, &mut rng),
        cross_o: AttentionParams::register(&mut s, "cross_o", d_k, d_k, &mut rng),
        static_w: s.add_glorot("static.w", dims.d_static, d_k, &mut rng),
        static_b: s.add_zeros("static.b", 1, d_k),
        hidden_w: s.add_glorot("head.hidden.w", 3 * d_k, d_k, &mut rng),
        hidden_b: s.add_zeros("head.hidden.b", 1, d_k),
        out_w: s.add_glorot("head.out.w", d_k, N_CLASSES, &mut rng),
        out_b: s.add_zeros("head.out.b", 1, N_CLASSES),
    };
    (ids, s)
}

impl FusionParams {
    pub fn init(dims: FusionDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let (ids, store) = register(dims, seed);
        Ok(Self {
            layout: FusionLayout { dims, ids },
            store,
        })
    }

    pub fn dims(&self) -> FusionDims {
        self.layout.dims
    }

    /// Rebuilds the layout around a loaded store, inferring dimensions from tensor shapes.
    pub fn from_store(store: ParamStore) -> Result<Self> {
        let shape = |name: &str| {
            store
                .find(name)
                .map(|id| store.get(id).shape())
                .ok_or_else(|| SaferError::Config(format!("checkpoint lacks tensor {name}")))
        };
        let (d_struct, d_k) = shape("embed_e.w")?;
        let dims = FusionDims {
            d_struct,
            d_note: shape("embed_o.w")?.0,
            d_static: shape("static.w")?.0,
            d_k,
        };
        let mut fresh = Self::init(dims, 0)?;
        fresh.store.check_layout(&store)?;
        fresh.store = store;
        Ok(fresh)
    }

    pub fn write_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.store.write_checkpoint(BufWriter::new(File::create(path)?))?)
    }

    pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(ParamStore::read_checkpoint(BufReader::new(File::open(path)?))?)
    }
}

/// One patient's model inputs as matrices.
#[derive(Clone, Debug)]
pub struct PatientInputs {
    pub structured: Matrix,
    pub notes: Matrix,
    pub static_features: Matrix,
}

impl PatientInputs {
    pub fn from_record(record: &PatientRecord) -> Result<Self> {
        if record.seq_len() == 0 || record.notes.is_empty() {
            return Err(SaferError::EmptySequence(format!("patient {} has no steps", record.id)));
        }
        Ok(Self {
            structured: Matrix::from_rows(&record.structured)?,
            notes: Matrix::from_rows(&record.notes)?,
            static_features: Matrix::row_vector(record.static_features.clone()),
        })
    }

    fn check(&self, dims: &FusionDims) -> Result<()> {
        let t = self.structured.rows();
        let ok = self.structured.cols() == dims.d_struct
            && self.notes.shape() == (t, dims.d_note)
            && self.static_features.cols() == dims.d_static;
        if !ok {
            return Err(SaferError::Precondition(format!(
                "input shapes structured {:?}, notes {:?}, static {:?} do not match model {:?}",
                self.structured.shape(),
                self.notes.shape(),
                self.static_features.shape(),
                dims
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TeacherGraph {
    /// `1 × 3d_k` unified embedding.
    pub h: Var,
    /// `1 × 25` classifier logits.
    pub logits: Var,
}

/// Embedding only.
pub fn embed_on_tape(tape: &mut Tape, bound: &Bound, layout: &FusionLayout, inputs: &PatientInputs) -> Result<Var> {
    inputs.check(&layout.dims)?;
    let ids = &layout.ids;
    let steps = inputs.structured.rows();
    let pe = sinusoidal_pe(steps, layout.dims.d_k)?;
    let mask = causal_mask(steps);

    let x_e = tape.input(inputs.structured.clone());
    let x_o = tape.input(inputs.notes.clone());
    let e = tape.affine(x_e, bound.get(ids.embed_e_w), bound.get(ids.embed_e_b))?;
    let o = tape.affine(x_o, bound.get(ids.embed_o_w), bound.get(ids.embed_o_b))?;
    let s_e = masked_self_attention(tape, bound, e, &ids.self_e, &mask, &pe)?.output;
    let s_o = masked_self_attention(tape, bound, o, &ids.self_o, &mask, &pe)?.output;
    let fused = cross_attention(tape, bound, s_e, s_o, &ids.cross_e, &ids.cross_o)?.output;
    let last = tape.row(fused, steps - 1)?;
    let x_d = tape.input(inputs.static_features.clone());
    let stat = tape.affine(x_d, bound.get(ids.static_w), bound.get(ids.static_b))?;
    Ok(tape.concat_cols(last, stat)?)
}

/// Classifier head on a `1 × 3d_k` embedding.
pub fn head_on_tape(tape: &mut Tape, bound: &Bound, layout: &FusionLayout, h: Var) -> Result<Var> {
    let ids = &layout.ids;
    let hidden = tape.affine(h, bound.get(ids.hidden_w), bound.get(ids.hidden_b))?;
    let hidden = tape.tanh(hidden);
    Ok(tape.affine(hidden, bound.get(ids.out_w), bound.get(ids.out_b))?)
}

pub fn forward_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    layout: &FusionLayout,
    inputs: &PatientInputs,
) -> Result<TeacherGraph> {
    let h = embed_on_tape(tape, bound, layout, inputs)?;
    let logits = head_on_tape(tape, bound, layout, h)?;
    Ok(TeacherGraph { h, logits })
}

/// Unified embedding `h` of length `3 d_k`.
pub fn encode_patient(record: &PatientRecord, params: &FusionParams) -> Result<Vec<f64>> {
    let inputs = PatientInputs::from_record(record)?;
    let mut tape = Tape::new();
    let bound = tape.bind(&params.store, false);
    let h = embed_on_tape(&mut tape, &bound, &params.layout, &inputs)?;
    Ok(tape.value(h).data().to_vec())
}

/// Treatment distribution for an embedding.
pub fn predict_treatment(h: &[f64], params: &FusionParams) -> Result<Vec<f64>> {
    let logits = treatment_logits(h, params)?;
    Ok(safer_nn::softmax(&logits))
}

pub fn treatment_logits(h: &[f64], params: &FusionParams) -> Result<Vec<f64>> {
    let want = params.dims().embedding_dim();
    if h.len() != want {
        return Err(SaferError::Precondition(format!("embedding has length {}, expected {want}", h.len())));
    }
    let mut tape = Tape::new();
    let bound = tape.bind(&params.store, false);
    let h = tape.input(Matrix::row_vector(h.to_vec()));
    let logits = head_on_tape(&mut tape, &bound, &params.layout, h)?;
    Ok(tape.value(logits).data().to_vec())
}

/// Embedding and treatment distribution in one pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutput {
    pub h: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn run_teacher(record: &PatientRecord, params: &FusionParams) -> Result<TeacherOutput> {
    let inputs = PatientInputs::from_record(record)?;
    let mut tape = Tape::new();
    let bound = tape.bind(&params.store, false);
    let g = forward_on_tape(&mut tape, &bound, &params.layout, &inputs)?;
    let logits = tape.value(g.logits).data().to_vec();
    Ok(TeacherOutput {
        h: tape.value(g.h).data().to_vec(),
        probs: safer_nn::softmax(&logits),
        logits,
    })
}

/// Mean cross-entropy of the teacher over a batch of prepared inputs.
pub(crate) fn batch_cross_entropy(
    tape: &mut Tape,
    bound: &Bound,
    layout: &FusionLayout,
    inputs: &[PatientInputs],
    labels: &[usize],
    batch: &[usize],
) -> Result<Var> {
    let w = 1.0 / batch.len() as f64;
    let mut terms = Vec::with_capacity(batch.len());
    for &i in batch {
        let g = forward_on_tape(tape, bound, layout, &inputs[i])?;
        terms.push((tape.softmax_cross_entropy(g.logits, labels[i])?, w));
    }
    Ok(tape.weighted_sum(&terms)?)
}

pub(crate) fn prepare(records: &[PatientRecord]) -> Result<(Vec<PatientInputs>, Vec<usize>)> {
    let inputs = records.iter().map(PatientInputs::from_record).collect::<Result<Vec<_>>>()?;
    Ok((inputs, records.iter().map(|r| r.next_treatment).collect()))
}

/// Trains the teacher on every patient's final-step target with cross-entropy.
pub fn train_teacher(
    train: &[PatientRecord],
    params0: &FusionParams,
    config: &TrainConfig,
) -> Result<(FusionParams, TrainLog)> {
    if train.is_empty() {
        return Err(SaferError::EmptyTraining("teacher training split is empty".into()));
    }
    let (inputs, labels) = prepare(train)?;
    let mut params = params0.clone();
    let mut trainer = Trainer::new(&params.store, config)?;
    let mut log = TrainLog::default();
    let layout = params.layout;
    for _ in 0..config.epochs {
        let e = trainer.epoch(&mut params.store, train.len(), |tape, bound, batch| {
            batch_cross_entropy(tape, bound, &layout, &inputs, &labels, batch)
        })?;
        log.epochs.push(e);
    }
    Ok((params, log))
}
