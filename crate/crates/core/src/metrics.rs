//! Classification and ranking metrics over 25-way treatment scores.
//!
//! Ranking ties are broken by ascending class index: among equal scores the
//! lower class ranks first.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaferError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AucMode {
    Micro,
    Macro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub value: f64,
    /// Classes left out of the macro average for lacking positives or negatives.
    pub skipped_classes: Vec<usize>,
}

fn check_scores(scores: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(SaferError::Precondition(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let k = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != k) || k == 0 {
        return Err(SaferError::Precondition("score rows must share a positive width".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(SaferError::Precondition(format!("label {l} outside 0..{k}")));
    }
    Ok(k)
}

/// Mann–Whitney form of the ROC AUC with mid-ranks for ties. `None` when a
/// side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid_rank * order[i..=j].iter().filter(|&&o| positive[o]).count() as f64;
        i = j + 1;
    }
    let n_pos = n_pos as f64;
    Some((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg as f64))
}

/// One-vs-rest ROC AUC. Micro pools every (score, indicator) pair; macro
/// averages over classes that have both positives and negatives.
pub fn auc(scores: &[Vec<f64>], labels: &[usize], mode: AucMode) -> Result<AucReport> {
    let k = check_scores(scores, labels)?;
    if labels.len() < 2 || labels.iter().all(|&l| l == labels[0]) {
        return Err(SaferError::UndefinedMetric("AUC needs at least two distinct labels".into()));
    }
    match mode {
        AucMode::Micro => {
            let flat: Vec<f64> = scores.iter().flatten().copied().collect();
            let pos: Vec<bool> = labels.iter().flat_map(|&l| (0..k).map(move |c| c == l)).collect();
            let value = binary_auc(&flat, &pos).expect("both sides present");
            Ok(AucReport { value, skipped_classes: Vec::new() })
        }
        AucMode::Macro => {
            let mut values = Vec::new();
            let mut skipped = Vec::new();
            for c in 0..k {
                let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
                let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
                match binary_auc(&col, &pos) {
                    Some(v) => values.push(v),
                    None => skipped.push(c),
                }
            }
            Ok(AucReport {
                value: values.iter().sum::<f64>() / values.len() as f64,
                skipped_classes: skipped,
            })
        }
    }
}

/// 1-based rank of `label` with ties broken by ascending class index.
pub fn rank_of(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > s || (v == s && c < label))
        .count()
}

pub fn hr_at_k(scores: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    let width = check_scores(scores, labels)?;
    if k == 0 || k > width {
        return Err(SaferError::Config(format!("k must lie in 1..={width}, got {k}")));
    }
    if labels.is_empty() {
        return Err(SaferError::UndefinedMetric("no instances".into()));
    }
    let hits = scores.iter().zip(labels).filter(|(s, &l)| rank_of(s, l) <= k).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn mrr_at_k(scores: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    let width = check_scores(scores, labels)?;
    if k == 0 || k > width {
        return Err(SaferError::Config(format!("k must lie in 1..={width}, got {k}")));
    }
    if labels.is_empty() {
        return Err(SaferError::UndefinedMetric("no instances".into()));
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(s, &l)| {
            let r = rank_of(s, l);
            if r <= k {
                1.0 / r as f64
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSubset {
    Survivors,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub micro_auc: f64,
    pub macro_auc: f64,
    pub hr_at_3: f64,
    pub mrr_at_3: f64,
    pub mortality_reduction: f64,
    pub n_eval: usize,
    pub skipped_classes: Vec<usize>,
}

impl MetricsReport {
    /// Ranking and AUC metrics of `scores` against `labels`.
    pub fn from_scores(scores: &[Vec<f64>], labels: &[usize], mortality_reduction: f64) -> Result<Self> {
        if labels.is_empty() {
            return Err(SaferError::UndefinedMetric("evaluation subset is empty".into()));
        }
        let micro = auc(scores, labels, AucMode::Micro)?;
        let macro_ = auc(scores, labels, AucMode::Macro)?;
        Ok(Self {
            micro_auc: micro.value,
            macro_auc: macro_.value,
            hr_at_3: hr_at_k(scores, labels, 3)?,
            mrr_at_3: mrr_at_k(scores, labels, 3)?,
            mortality_reduction,
            n_eval: labels.len(),
            skipped_classes: macro_.skipped_classes,
        })
    }

    pub fn write_json<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "micro_auc,macro_auc,hr_at_3,mrr_at_3,mortality_reduction,n_eval")?;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            self.micro_auc, self.macro_auc, self.hr_at_3, self.mrr_at_3, self.mortality_reduction, self.n_eval
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mann_whitney_with_tie() {
        // positives {0.8, 0.4}, negatives {0.4, 0.1}: pairs win, tie, win, win
        let auc = binary_auc(&[0.8, 0.4, 0.4, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 3.5 / 4.0);
    }

    #[test]
    fn ranks_break_ties_by_class() {
        let s = [0.2, 0.5, 0.5, 0.1];
        assert_eq!(rank_of(&s, 1), 1);
        assert_eq!(rank_of(&s, 2), 2);
        assert_eq!(rank_of(&s, 0), 3);
        assert_eq!(rank_of(&s, 3), 4);
    }

    #[test]
    fn hr_and_mrr_definitions() {
        let scores = vec![vec![0.1, 0.9, 0.5, 0.3], vec![0.1, 0.9, 0.5, 0.3], vec![0.4, 0.3, 0.2, 0.1]];
        // ranks 2, 4 and 1
        let labels = [2, 0, 0];
        assert!((hr_at_k(&scores, &labels, 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((mrr_at_k(&scores, &labels, 3).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(hr_at_k(&scores, &labels, 4).unwrap(), 1.0);
        assert!(hr_at_k(&scores, &labels, 5).is_err());
    }

    #[test]
    fn single_label_is_undefined() {
        let scores = vec![vec![0.3, 0.7], vec![0.6, 0.4]];
        assert!(matches!(auc(&scores, &[1, 1], AucMode::Micro), Err(SaferError::UndefinedMetric(_))));
        assert!(matches!(auc(&scores, &[1, 1], AucMode::Macro), Err(SaferError::UndefinedMetric(_))));
    }

    #[test]
    fn macro_skips_absent_classes() {
        let scores = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1]];
        let r = auc(&scores, &[0, 1], AucMode::Macro).unwrap();
        assert_eq!(r.value, 1.0);
        assert_eq!(r.skipped_classes, vec![2]);
    }
}
