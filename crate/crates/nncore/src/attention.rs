//! Single-head attention blocks: causal self-attention with an additive
//! sinusoidal position encoding, and the two-branch cross-attention that
//! fuses the structured and note streams.

use rand::Rng;

use crate::error::{shape_err, NnError, Result};
use crate::matrix::Matrix;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Bound, Tape, Var};

/// Additive value for masked (future) positions.
pub const MASK_VALUE: f64 = -1e9;

/// `T × d_k` sinusoidal encoding: `(t, 2i) = sin(t / 10000^(2i/d_k))`, `(t, 2i+1) = cos(·)`.
pub fn sinusoidal_pe(steps: usize, d_k: usize) -> Result<Matrix> {
    if steps == 0 || d_k == 0 {
        return Err(NnError::Config(format!(
            "positional encoding needs T >= 1 and d_k >= 1 (got T={steps}, d_k={d_k})"
        )));
    }
    if !d_k.is_multiple_of(2) {
        return Err(NnError::Config(format!("d_k must be even, got {d_k}")));
    }
    let mut pe = Matrix::zeros(steps, d_k);
    for t in 0..steps {
        for i in 0..d_k / 2 {
            let angle = t as f64 / 10000f64.powf((2 * i) as f64 / d_k as f64);
            pe.set(t, 2 * i, angle.sin());
            pe.set(t, 2 * i + 1, angle.cos());
        }
    }
    Ok(pe)
}

/// `0` on and below the diagonal, [`MASK_VALUE`] strictly above.
pub fn causal_mask(steps: usize) -> Matrix {
    let mut m = Matrix::zeros(steps, steps);
    for r in 0..steps {
        for c in r + 1..steps {
            m.set(r, c, MASK_VALUE);
        }
    }
    m
}

/// Query/key/value projections of one attention branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

impl AttentionParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_k: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w_q: store.add_glorot(format!("{prefix}.w_q"), d_in, d_k, rng),
            w_k: store.add_glorot(format!("{prefix}.w_k"), d_in, d_k, rng),
            w_v: store.add_glorot(format!("{prefix}.w_v"), d_in, d_k, rng),
        }
    }

    pub fn d_k(&self, store: &ParamStore) -> usize {
        store.get(self.w_q).cols()
    }

    fn check(&self, store_shape: impl Fn(ParamId) -> (usize, usize), d_in: usize) -> Result<usize> {
        let (qi, qk) = store_shape(self.w_q);
        for id in [self.w_k, self.w_v] {
            if store_shape(id) != (qi, qk) {
                return Err(shape_err(
                    "attention",
                    format!("projection {:?} differs from W_Q {:?}", store_shape(id), (qi, qk)),
                ));
            }
        }
        if qi != d_in {
            return Err(shape_err(
                "attention",
                format!("input width {d_in} does not match projection rows {qi}"),
            ));
        }
        Ok(qk)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    /// Row-stochastic attention matrix.
    pub weights: Var,
}

fn attend(tape: &mut Tape, queries: Var, keys: Var, values: Var, mask: Option<&Matrix>, d_k: usize) -> Result<AttentionOutput> {
    let mut logits = tape.matmul_t(queries, keys)?;
    if let Some(mask) = mask {
        let m = tape.input(mask.clone());
        logits = tape.add(logits, m)?;
    }
    let scaled = tape.scale(logits, 1.0 / (d_k as f64).sqrt());
    let weights = tape.softmax_rows(scaled);
    let output = tape.matmul(weights, values)?;
    Ok(AttentionOutput { output, weights })
}

/// `softmax(((X W_Q)(X W_K)ᵀ + M) / √d_k) · X W_V + PE`
pub fn masked_self_attention(
    tape: &mut Tape,
    bound: &Bound,
    x: Var,
    params: &AttentionParams,
    mask: &Matrix,
    pe: &Matrix,
) -> Result<AttentionOutput> {
    let (steps, d_in) = tape.value(x).shape();
    let d_k = params.check(|id| tape.value(bound.get(id)).shape(), d_in)?;
    if mask.shape() != (steps, steps) {
        return Err(shape_err("masked_self_attention", format!("mask {:?} for T={steps}", mask.shape())));
    }
    if pe.shape() != (steps, d_k) {
        return Err(shape_err("masked_self_attention", format!("PE {:?} for ({steps},{d_k})", pe.shape())));
    }
    let q = tape.matmul(x, bound.get(params.w_q))?;
    let k = tape.matmul(x, bound.get(params.w_k))?;
    let v = tape.matmul(x, bound.get(params.w_v))?;
    let att = attend(tape, q, k, v, Some(mask), d_k)?;
    let pe = tape.input(pe.clone());
    let output = tape.add(att.output, pe)?;
    Ok(AttentionOutput {
        output,
        weights: att.weights,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct CrossAttentionOutput {
    /// `T × 2d_k`: structured-keyed branch, then note-keyed branch.
    pub output: Var,
    pub weights_e: Var,
    pub weights_o: Var,
}

/// Bidirectional cross-attention.
///
/// Branch one queries from the note stream into the structured stream,
/// `softmax(S_O W_E^Q (S_E W_E^K)ᵀ / √d_k) S_E W_E^V`; branch two is the mirror
/// image with the `O` projections. Each branch keeps its own value projection.
pub fn cross_attention(
    tape: &mut Tape,
    bound: &Bound,
    s_e: Var,
    s_o: Var,
    params_e: &AttentionParams,
    params_o: &AttentionParams,
) -> Result<CrossAttentionOutput> {
    let (te, de) = tape.value(s_e).shape();
    let (to, d_o) = tape.value(s_o).shape();
    if te != to || de != d_o {
        return Err(shape_err("cross_attention", format!("S_E ({te},{de}) vs S_O ({to},{d_o})")));
    }
    let d_k = params_e.check(|id| tape.value(bound.get(id)).shape(), de)?;
    let d_k_o = params_o.check(|id| tape.value(bound.get(id)).shape(), de)?;
    if d_k != d_k_o {
        return Err(shape_err("cross_attention", format!("branch widths {d_k} vs {d_k_o}")));
    }

    let q1 = tape.matmul(s_o, bound.get(params_e.w_q))?;
    let k1 = tape.matmul(s_e, bound.get(params_e.w_k))?;
    let v1 = tape.matmul(s_e, bound.get(params_e.w_v))?;
    let b1 = attend(tape, q1, k1, v1, None, d_k)?;

    let q2 = tape.matmul(s_e, bound.get(params_o.w_q))?;
    let k2 = tape.matmul(s_o, bound.get(params_o.w_k))?;
    let v2 = tape.matmul(s_o, bound.get(params_o.w_v))?;
    let b2 = attend(tape, q2, k2, v2, None, d_k)?;

    let output = tape.concat_cols(b1.output, b2.output)?;
    Ok(CrossAttentionOutput {
        output,
        weights_e: b1.weights,
        weights_o: b2.weights,
    })
}
