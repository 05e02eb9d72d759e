//! Conformal selection of confident recommendations.
//!
//! A ridge model predicts each patient's uncertainty score from label-free
//! features. Calibration points whose true score is at or above a threshold
//! `c` are the nulls; a test point's p-value is its randomized rank among
//! them, and Benjamini–Hochberg picks the test points to recommend.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaferError};
use crate::seeds::{derive_seed, stream_rng};
use crate::stats::{mean, quantile, std_error};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RidgeConfig {
    pub lambda: f64,
    pub fit_intercept: bool,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        Self { lambda: 1.0, fit_intercept: true }
    }
}

/// Linear uncertainty-score predictor `x ↦ xᵀβ + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePredictor {
    pub coef: Vec<f64>,
    pub intercept: f64,
}

impl ScorePredictor {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }
}

/// Solves `(XᵀX + λI) β = Xᵀκ` by Cholesky factorization, after centering
/// when an intercept is fitted.
pub fn fit_score_predictor(features: &[Vec<f64>], kappas: &[f64], config: RidgeConfig) -> Result<ScorePredictor> {
    let n = features.len();
    if n == 0 || n != kappas.len() {
        return Err(SaferError::InsufficientData(format!(
            "{n} feature rows for {} scores",
            kappas.len()
        )));
    }
    if !(config.lambda.is_finite() && config.lambda >= 0.0) {
        return Err(SaferError::Config(format!("lambda must be >= 0, got {}", config.lambda)));
    }
    let d = features[0].len();
    if features.iter().any(|r| r.len() != d) {
        return Err(SaferError::Precondition("feature rows differ in length".into()));
    }

    let (x_mean, k_mean) = if config.fit_intercept {
        let mut m = vec![0.0; d];
        for r in features {
            for (a, v) in m.iter_mut().zip(r) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|a| *a /= n as f64);
        (m, mean(kappas))
    } else {
        (vec![0.0; d], 0.0)
    };
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j] - x_mean[j]);
    let y = DVector::from_iterator(n, kappas.iter().map(|k| k - k_mean));
    let mut gram = x.tr_mul(&x);
    for i in 0..d {
        gram[(i, i)] += config.lambda;
    }
    let rhs = x.tr_mul(&y);

    let singular = || {
        SaferError::LinearAlgebra(format!(
            "normal equations are singular at lambda = {}; use lambda > 0",
            config.lambda
        ))
    };
    let max_diag = (0..d).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    let chol = gram.cholesky().ok_or_else(singular)?;
    let min_pivot = (0..d).map(|i| chol.l_dirty()[(i, i)].powi(2)).fold(f64::INFINITY, f64::min);
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
    if !(min_pivot > 1e-12 * max_diag.max(f64::MIN_POSITIVE)) {
        return Err(singular());
    }
    let beta = chol.solve(&rhs);
    let coef: Vec<f64> = beta.iter().copied().collect();
    let intercept = k_mean - coef.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
    Ok(ScorePredictor { coef, intercept })
}

/// Upper bound `M` on scores: a high quantile of the training scores.
pub fn clip_bound(training_kappas: &[f64], q: f64) -> Result<f64> {
    if training_kappas.is_empty() {
        return Err(SaferError::InsufficientData("no training scores for the clip bound".into()));
    }
    let m = quantile(training_kappas, q);
    if m > 0.0 {
        Ok(m)
    } else {
        Ok(f64::MIN_POSITIVE)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalRecord {
    pub kappa_true: f64,
    pub kappa_pred: f64,
    /// `kappa_true >= c`.
    pub is_null: bool,
}

impl CalRecord {
    pub fn new(kappa_true: f64, kappa_pred: f64, c: f64) -> Self {
        Self {
            kappa_true,
            kappa_pred,
            is_null: kappa_true >= c,
        }
    }
}

/// `[#{null i: κ̂_i < κ̂} + u (1 + #{null i: κ̂_i = κ̂})] / (n + 1)`.
pub fn conformal_pvalue(cal: &[CalRecord], test_pred: f64, u: f64) -> f64 {
    let mut below = 0usize;
    let mut ties = 0usize;
    for r in cal.iter().filter(|r| r.is_null) {
        if r.kappa_pred < test_pred {
            below += 1;
        } else if r.kappa_pred == test_pred {
            ties += 1;
        }
    }
    (below as f64 + u * (1 + ties) as f64) / (cal.len() + 1) as f64
}

/// `J = κ + 2M · 1{flag}` for `0 ≤ κ ≤ M`.
pub fn nonconformity_j(kappa: f64, flag: bool, m: f64) -> Result<f64> {
    if !(0.0..=m).contains(&kappa) {
        return Err(SaferError::Bound(format!("score {kappa} outside [0, {m}]")));
    }
    Ok(if flag { kappa + 2.0 * m } else { kappa })
}

/// The same p-value computed through the `J` scores. Confident calibration
/// points are pushed above `2M`, so only nulls can rank below the test point,
/// which is scored with the indicator off.
pub fn conformal_pvalue_j(cal: &[CalRecord], test_pred: f64, m: f64, u: f64) -> Result<f64> {
    let v_test = nonconformity_j(test_pred, false, m)?;
    let mut below = 0usize;
    let mut ties = 0usize;
    for r in cal {
        let v = nonconformity_j(r.kappa_pred, !r.is_null, m)?;
        if v < v_test {
            below += 1;
        } else if v == v_test {
            ties += 1;
        }
    }
    Ok((below as f64 + u * (1 + ties) as f64) / (cal.len() + 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub p_values: Vec<f64>,
    /// Number of rejections; zero when nothing is selected.
    pub k: usize,
    /// Selected indices in increasing order.
    pub selected: Vec<usize>,
    pub fdp: Option<f64>,
    pub power: Option<f64>,
}

impl SelectionResult {
    /// Fills in the realized false discovery proportion and power given
    /// which hypotheses are truly null.
    pub fn score(&mut self, is_null: &[bool]) -> Result<()> {
        if is_null.len() != self.p_values.len() {
            return Err(SaferError::Precondition("null flags and p-values differ in length".into()));
        }
        let false_sel = self.selected.iter().filter(|&&j| is_null[j]).count();
        let true_sel = self.selected.len() - false_sel;
        let non_null = is_null.iter().filter(|n| !**n).count();
        self.fdp = Some(false_sel as f64 / self.selected.len().max(1) as f64);
        self.power = Some(true_sel as f64 / non_null.max(1) as f64);
        Ok(())
    }
}

/// Benjamini–Hochberg step-up selection at level `alpha`.
pub fn bh_select(p_values: &[f64], alpha: f64) -> Result<SelectionResult> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SaferError::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(SaferError::Precondition(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut sorted = p_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = (1..=m)
        .rev()
        .find(|&r| sorted[r - 1] <= alpha * r as f64 / m as f64)
        .unwrap_or(0);
    let selected = if k == 0 {
        Vec::new()
    } else {
        let cut = sorted[k - 1];
        (0..m).filter(|&j| p_values[j] <= cut).collect()
    };
    Ok(SelectionResult {
        p_values: p_values.to_vec(),
        k,
        selected,
        fdp: None,
        power: None,
    })
}

/// Tie-break draw for test point `j` of replicate `replicate`, read from a
/// dedicated stream so that every p-value formulation sees the same value.
pub fn tie_break(seed: u64, replicate: u64, j: usize) -> f64 {
    let mut rng = stream_rng(derive_seed(seed, "tie-break"), replicate);
    rng.set_word_pos(2 * j as u128);
    rng.random::<f64>()
}

/// Scores of the pooled calibration and test patients, already clipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformalPool {
    pub kappa_true: Vec<f64>,
    pub kappa_pred: Vec<f64>,
}

impl ConformalPool {
    pub fn len(&self) -> usize {
        self.kappa_true.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kappa_true.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub cs: Vec<f64>,
    pub replicates: usize,
    /// Calibration size drawn from the pool each replicate; the rest is test.
    pub n_cal: usize,
    pub seed: u64,
    /// Levels `t` at which the selective guarantee is checked.
    pub guarantee_levels: Vec<f64>,
}

/// `start, start + step, …` up to `stop` inclusive, rounded to 12 decimals.
pub fn uniform_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && start.is_finite() && stop.is_finite()) || stop < start {
        return Err(SaferError::Config(format!("bad grid {start}:{stop}:{step}")));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

pub fn default_alphas() -> Vec<f64> {
    uniform_grid(0.05, 0.95, 0.05).expect("static grid")
}

pub fn default_cs() -> Vec<f64> {
    vec![0.1, 0.2, 0.3, 0.4]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub c: f64,
    pub alpha: f64,
    pub mean_fdr: f64,
    pub se_fdr: f64,
    pub mean_power: f64,
    pub se_power: f64,
    pub replicates: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuaranteePoint {
    pub c: f64,
    pub t: f64,
    /// Mean over replicates of the fraction of test points that are null,
    /// selected at level `t` and have `p_j ≤ t`.
    pub mean: f64,
    pub se: f64,
    pub replicates: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub points: Vec<SweepPoint>,
    pub guarantee: Vec<GuaranteePoint>,
}

impl SweepGrid {
    pub fn point(&self, c: f64, alpha: f64) -> Option<&SweepPoint> {
        self.points
            .iter()
            .find(|p| (p.c - c).abs() < 1e-12 && (p.alpha - alpha).abs() < 1e-12)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "c,alpha,mean_fdr,se_fdr,mean_power,se_power,replicates")?;
        for p in &self.points {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                p.c, p.alpha, p.mean_fdr, p.se_fdr, p.mean_power, p.se_power, p.replicates
            )?;
        }
        Ok(())
    }

    pub fn write_guarantee_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "c,t,mean,se,replicates")?;
        for g in &self.guarantee {
            writeln!(w, "{},{},{},{},{}", g.c, g.t, g.mean, g.se, g.replicates)?;
        }
        Ok(())
    }
}

struct ReplicateOutcome {
    /// Indexed `[c][alpha]`.
    fdp: Vec<Vec<f64>>,
    power: Vec<Vec<f64>>,
    /// Indexed `[c][t]`.
    guarantee: Vec<Vec<f64>>,
}

fn run_replicate(pool: &ConformalPool, config: &SweepConfig, replicate: u64) -> Result<ReplicateOutcome> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut stream_rng(derive_seed(config.seed, "resample"), replicate));
    let (cal_idx, test_idx) = order.split_at(config.n_cal);
    let u: Vec<f64> = (0..test_idx.len()).map(|j| tie_break(config.seed, replicate, j)).collect();

    let mut out = ReplicateOutcome {
        fdp: Vec::with_capacity(config.cs.len()),
        power: Vec::with_capacity(config.cs.len()),
        guarantee: Vec::with_capacity(config.cs.len()),
    };
    for &c in &config.cs {
        let cal: Vec<CalRecord> = cal_idx
            .iter()
            .map(|&i| CalRecord::new(pool.kappa_true[i], pool.kappa_pred[i], c))
            .collect();
        let p: Vec<f64> = test_idx
            .iter()
            .zip(&u)
            .map(|(&i, &u)| conformal_pvalue(&cal, pool.kappa_pred[i], u))
            .collect();
        let is_null: Vec<bool> = test_idx.iter().map(|&i| pool.kappa_true[i] >= c).collect();

        let mut fdp = Vec::with_capacity(config.alphas.len());
        let mut power = Vec::with_capacity(config.alphas.len());
        for &alpha in &config.alphas {
            let mut sel = bh_select(&p, alpha)?;
            sel.score(&is_null)?;
            fdp.push(sel.fdp.unwrap_or(0.0));
            power.push(sel.power.unwrap_or(0.0));
        }
        out.fdp.push(fdp);
        out.power.push(power);

        let mut g = Vec::with_capacity(config.guarantee_levels.len());
        for &t in &config.guarantee_levels {
            let sel = bh_select(&p, t)?;
            let hits = sel
                .selected
                .iter()
                .filter(|&&j| is_null[j] && p[j] <= t)
                .count();
            g.push(hits as f64 / test_idx.len() as f64);
        }
        out.guarantee.push(g);
    }
    Ok(out)
}

/// Monte Carlo estimate of FDR and power over an `(alpha, c)` grid. Each
/// replicate draws a fresh calibration/test split of the pool and fresh
/// tie-break variables; replicates run in parallel and are aggregated in
/// replicate order.
pub fn estimate_fdr_power(pool: &ConformalPool, config: &SweepConfig) -> Result<SweepGrid> {
    if config.alphas.is_empty() || config.cs.is_empty() {
        return Err(SaferError::Config("alpha and c grids must be non-empty".into()));
    }
    if config.replicates == 0 {
        return Err(SaferError::Config("replicates must be at least 1".into()));
    }
    if pool.kappa_true.len() != pool.kappa_pred.len() {
        return Err(SaferError::Precondition("pool score vectors differ in length".into()));
    }
    if config.n_cal == 0 || config.n_cal >= pool.len() {
        return Err(SaferError::Config(format!(
            "calibration size {} must lie in 1..{}",
            config.n_cal,
            pool.len()
        )));
    }
    let outcomes = (0..config.replicates as u64)
        .into_par_iter()
        .map(|r| run_replicate(pool, config, r))
        .collect::<Result<Vec<_>>>()?;

    let mut grid = SweepGrid::default();
    for (ci, &c) in config.cs.iter().enumerate() {
        for (ai, &alpha) in config.alphas.iter().enumerate() {
            let fdp: Vec<f64> = outcomes.iter().map(|o| o.fdp[ci][ai]).collect();
            let power: Vec<f64> = outcomes.iter().map(|o| o.power[ci][ai]).collect();
            grid.points.push(SweepPoint {
                c,
                alpha,
                mean_fdr: mean(&fdp),
                se_fdr: std_error(&fdp),
                mean_power: mean(&power),
                se_power: std_error(&power),
                replicates: config.replicates,
            });
        }
        for (ti, &t) in config.guarantee_levels.iter().enumerate() {
            let vals: Vec<f64> = outcomes.iter().map(|o| o.guarantee[ci][ti]).collect();
            grid.guarantee.push(GuaranteePoint {
                c,
                t,
                mean: mean(&vals),
                se: std_error(&vals),
                replicates: vals.len(),
            });
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_cal() -> Vec<CalRecord> {
        [(0.1, 0.05), (0.3, 0.5), (0.2, 0.45), (0.4, 0.02)]
            .iter()
            .map(|&(pred, true_k)| CalRecord::new(true_k, pred, 0.4))
            .collect()
    }

    #[test]
    fn hand_counted_pvalue() {
        let cal = hand_cal();
        assert_eq!(cal.iter().filter(|r| r.is_null).count(), 2);
        assert_eq!(conformal_pvalue(&cal, 0.35, 0.5), 0.5);
    }

    #[test]
    fn no_nulls_gives_u_over_n_plus_one() {
        let cal: Vec<CalRecord> = (0..4).map(|i| CalRecord::new(0.01, i as f64, 0.4)).collect();
        assert_eq!(conformal_pvalue(&cal, 2.0, 0.3), 0.3 / 5.0);
    }

    #[test]
    fn pvalue_positive_for_positive_u() {
        let cal = hand_cal();
        let p = conformal_pvalue(&cal, 0.0, 1e-12);
        assert!(p > 0.0 && p < 1e-11);
    }

    #[test]
    fn ties_use_the_shared_draw() {
        let cal = vec![CalRecord::new(1.0, 0.3, 0.5), CalRecord::new(1.0, 0.3, 0.5)];
        assert_eq!(conformal_pvalue(&cal, 0.3, 0.5), 1.5 / 3.0);
    }

    #[test]
    fn j_score_cases() {
        assert_eq!(nonconformity_j(0.3, false, 1.0).unwrap(), 0.3);
        assert_eq!(nonconformity_j(0.3, true, 1.0).unwrap(), 2.3);
        assert!(matches!(nonconformity_j(1.5, false, 1.0), Err(SaferError::Bound(_))));
        let cal = hand_cal();
        assert_eq!(
            conformal_pvalue_j(&cal, 0.35, 1.0, 0.5).unwrap(),
            conformal_pvalue(&cal, 0.35, 0.5)
        );
    }

    #[test]
    fn bh_hand_case() {
        let sel = bh_select(&[0.30, 0.01, 0.12, 0.04], 0.2).unwrap();
        assert_eq!(sel.k, 3);
        assert_eq!(sel.selected, vec![1, 2, 3]);
        let none = bh_select(&[1.0; 5], 0.5).unwrap();
        assert_eq!((none.k, none.selected.len()), (0, 0));
        let all = bh_select(&[0.0; 5], 0.05).unwrap();
        assert_eq!(all.k, 5);
        let empty = bh_select(&[], 0.1).unwrap();
        assert_eq!(empty.k, 0);
    }

    #[test]
    fn bh_scoring() {
        let mut sel = bh_select(&[0.01, 0.02, 0.9], 0.5).unwrap();
        sel.score(&[true, false, false]).unwrap();
        assert_eq!(sel.fdp, Some(0.5));
        assert_eq!(sel.power, Some(0.5));
    }

    #[test]
    fn ridge_hand_system() {
        let x = vec![
            vec![1.0, 2.0],
            vec![0.5, -1.0],
            vec![2.0, 1.0],
            vec![-1.0, 1.5],
            vec![0.0, 3.0],
        ];
        let k = [1.0, 0.2, 2.5, -0.5, 1.7];
        let fit = fit_score_predictor(&x, &k, RidgeConfig { lambda: 1.0, fit_intercept: false }).unwrap();
        // XᵀX + I = [[7.25, 2], [2, 18.25]], Xᵀκ = [6.6, 8.65]; invert the 2×2 by hand.
        let det = 7.25 * 18.25 - 2.0 * 2.0;
        assert!((fit.coef[0] - (18.25 * 6.6 - 2.0 * 8.65) / det).abs() < 1e-12);
        assert!((fit.coef[1] - (7.25 * 8.65 - 2.0 * 6.6) / det).abs() < 1e-12);
        assert_eq!(fit.intercept, 0.0);
    }

    #[test]
    fn ridge_singular_at_zero_lambda() {
        let x = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]];
        let r = fit_score_predictor(&x, &[1.0, 2.0, 3.0], RidgeConfig { lambda: 0.0, fit_intercept: false });
        assert!(matches!(r, Err(SaferError::LinearAlgebra(_))));
    }

    #[test]
    fn grid_parsing() {
        let g = uniform_grid(0.05, 0.95, 0.05).unwrap();
        assert_eq!(g.len(), 19);
        assert_eq!(g[18], 0.95);
        assert_eq!(g[1], 0.1);
        assert!(uniform_grid(1.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn tie_break_is_keyed() {
        assert_eq!(tie_break(3, 7, 2), tie_break(3, 7, 2));
        assert_ne!(tie_break(3, 7, 2), tie_break(3, 7, 3));
        assert_ne!(tie_break(3, 7, 2), tie_break(3, 8, 2));
    }
}
