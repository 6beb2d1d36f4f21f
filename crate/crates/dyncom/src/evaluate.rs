//! Held-out link prediction metrics.
//!
//! Predictions are posterior link probabilities per held-out dyad; the two
//! scalar summaries are AUC (Mann-Whitney rank statistic, ties credited
//! half) and average precision (area under the precision-recall step
//! curve).

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::HoldoutMask;

/// One scored held-out dyad.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionEntry {
    pub t: u32,
    pub i: u32,
    pub j: u32,
    pub label: bool,
    pub prob: f64,
}

/// Scored holdout with its summary metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionReport {
    pub entries: Vec<PredictionEntry>,
    pub auc: f64,
    pub avg_precision: f64,
    pub n_samples_used: u64,
}

/// Turns per-sample dyad rates into link probabilities: one minus the mean
/// survival e^(-rate) over samples. Rows are samples, all the same length.
pub fn predict_probs(sample_rates: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = sample_rates.first() else {
        return Err(Error::Parameter("prediction requires at least one posterior sample".into()));
    };
    let n = first.len();
    let mut survival = vec![0.0; n];
    for (s, rates) in sample_rates.iter().enumerate() {
        if rates.len() != n {
            return Err(Error::Inconsistency(format!(
                "sample {s} has {} rates, expected {n}",
                rates.len()
            )));
        }
        for (acc, &r) in survival.iter_mut().zip(rates) {
            if !(r >= 0.0) {
                return Err(Error::Parameter(format!("negative or NaN dyad rate {r}")));
            }
            *acc += (-r).exp();
        }
    }
    let m = sample_rates.len() as f64;
    Ok(survival.into_iter().map(|s| 1.0 - s / m).collect())
}

/// Probability that a random positive outranks a random negative, ties
/// counted half, computed from midranks. Needs both classes.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    check_paired(labels, scores)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Midranks: tied scores share the average of the ranks they span.
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let midrank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        start = end;
    }
    let n_pos = n_pos as f64;
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg as f64))
}

/// Mean of precision-at-rank over the ranks holding positives, scores
/// sorted descending with stable order on ties. Needs at least one
/// positive.
pub fn average_precision(labels: &[bool], scores: &[f64]) -> Result<f64> {
    check_paired(labels, scores)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive entry".into(),
        ));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut cum_pos = 0u64;
    let mut total = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] {
            cum_pos += 1;
            total += cum_pos as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}

fn check_paired(labels: &[bool], scores: &[f64]) -> Result<()> {
    if labels.len() != scores.len() {
        return Err(Error::Parameter(format!(
            "{} labels but {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::UndefinedMetric("no entries to evaluate".into()));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Parameter(format!("NaN score {s}")));
    }
    Ok(())
}

/// Assembles the full report for a scored holdout. Probabilities follow
/// the mask's entry order.
pub fn evaluate(mask: &HoldoutMask, probs: &[f64], n_samples_used: u64) -> Result<PredictionReport> {
    if probs.len() != mask.len() {
        return Err(Error::Parameter(format!(
            "{} probabilities for {} held-out entries",
            probs.len(),
            mask.len()
        )));
    }
    let entries: Vec<PredictionEntry> = mask
        .entries()
        .iter()
        .zip(probs)
        .map(|(e, &p)| PredictionEntry { t: e.t, i: e.i, j: e.j, label: e.label, prob: p })
        .collect();
    for e in &entries {
        if !(0.0..=1.0).contains(&e.prob) {
            return Err(Error::Parameter(format!(
                "probability {} outside [0, 1] for dyad ({}, {}) at step {}",
                e.prob, e.i, e.j, e.t
            )));
        }
    }
    let labels: Vec<bool> = entries.iter().map(|e| e.label).collect();
    let auc = auc(&labels, probs)?;
    let avg_precision = average_precision(&labels, probs)?;
    Ok(PredictionReport { entries, auc, avg_precision, n_samples_used })
}

/// Writes per-entry predictions as CSV (`t,i,j,label,prob`) straight from
/// a mask and its probabilities, without requiring computable metrics.
pub fn write_predictions_csv(mask: &HoldoutMask, probs: &[f64], path: &Path) -> Result<()> {
    if probs.len() != mask.len() {
        return Err(Error::Parameter(format!(
            "{} probabilities for {} held-out entries",
            probs.len(),
            mask.len()
        )));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "t,i,j,label,prob")?;
    for (e, &p) in mask.entries().iter().zip(probs) {
        writeln!(w, "{},{},{},{},{p:.17}", e.t, e.i, e.j, u8::from(e.label))?;
    }
    w.flush()?;
    Ok(())
}

impl PredictionReport {
    /// Writes the per-entry predictions as CSV: `t,i,j,label,prob`.
    pub fn save_predictions_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "t,i,j,label,prob")?;
        for e in &self.entries {
            writeln!(w, "{},{},{},{},{:.17}", e.t, e.i, e.j, u8::from(e.label), e.prob)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One-line summary, the same text the CLI prints.
    pub fn summary_line(&self) -> String {
        format!(
            "{:.6},{:.6},{},{}",
            self.auc,
            self.avg_precision,
            self.entries.len(),
            self.n_samples_used
        )
    }

    /// Writes the summary CSV: a header and the [`summary_line`] row.
    ///
    /// [`summary_line`]: PredictionReport::summary_line
    pub fn save_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "auc,avg_precision,n_entries,n_samples")?;
        writeln!(w, "{}", self.summary_line())?;
        w.flush()?;
        Ok(())
    }
}
