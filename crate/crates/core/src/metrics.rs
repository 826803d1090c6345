//! Accuracy, ECE, adaptive ECE, MCE and AURC over prediction records.
//!
//! Metrics only look at `(confidence, correct)` pairs. Equal-width bins put a
//! confidence lying exactly on an edge into the higher bin, and 1.0 into the
//! last bin.

use serde::{Deserialize, Serialize};

use crate::adaptation::PredictionRecord;
use crate::analysis::GeometryDiagnostics;
use crate::error::{Error, Result};

pub const DEFAULT_NUM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub mean_confidence: Option<f64>,
    pub mean_accuracy: Option<f64>,
}

impl BinStat {
    pub fn gap(&self) -> Option<f64> {
        Some((self.mean_confidence? - self.mean_accuracy?).abs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub num_samples: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub aece: f64,
    pub mce: f64,
    pub aurc: f64,
    pub mean_confidence: f64,
    pub num_bins: usize,
    pub equal_width_bins: Vec<BinStat>,
    pub adaptive_bins: Vec<BinStat>,
    pub diagnostics: Option<GeometryDiagnostics>,
}

impl CalibrationReport {
    pub fn from_records(records: &[PredictionRecord], num_bins: usize) -> Result<Self> {
        check(records, num_bins)?;
        let equal_width_bins = reliability_data(records, num_bins)?;
        let adaptive_bins = adaptive_bins(records, num_bins)?;
        Ok(Self {
            num_samples: records.len(),
            accuracy: accuracy(records)?,
            ece: weighted_gap(&equal_width_bins, records.len()),
            aece: weighted_gap(&adaptive_bins, records.len()),
            mce: max_gap(&equal_width_bins),
            aurc: aurc(records)?,
            mean_confidence: records.iter().map(|r| r.confidence).sum::<f64>() / records.len() as f64,
            num_bins,
            equal_width_bins,
            adaptive_bins,
            diagnostics: None,
        })
    }

    pub fn with_diagnostics(mut self, diagnostics: GeometryDiagnostics) -> Self {
        self.diagnostics = Some(diagnostics);
        self
    }
}

fn check(records: &[PredictionRecord], num_bins: usize) -> Result<()> {
    if records.is_empty() {
        return Err(Error::domain("no prediction records"));
    }
    if num_bins == 0 {
        return Err(Error::config("num_bins must be at least 1"));
    }
    if let Some(r) = records.iter().find(|r| !(0.0..=1.0).contains(&r.confidence)) {
        return Err(Error::domain(format!(
            "sample {} has confidence {} outside [0, 1]",
            r.sample_id, r.confidence
        )));
    }
    Ok(())
}

fn weighted_gap(bins: &[BinStat], total: usize) -> f64 {
    bins.iter()
        .filter_map(|b| b.gap().map(|g| b.count as f64 / total as f64 * g))
        .sum()
}

fn max_gap(bins: &[BinStat]) -> f64 {
    bins.iter().filter_map(BinStat::gap).fold(0.0, f64::max)
}

pub fn accuracy(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::domain("no prediction records"));
    }
    Ok(records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64)
}

pub fn equal_width_bin(confidence: f64, num_bins: usize) -> usize {
    ((confidence * num_bins as f64).floor() as usize).min(num_bins - 1)
}

fn summarize(lower: f64, upper: f64, members: impl Iterator<Item = (f64, bool)>) -> BinStat {
    let (mut count, mut conf, mut hits) = (0usize, 0.0, 0usize);
    for (c, ok) in members {
        count += 1;
        conf += c;
        hits += ok as usize;
    }
    let (mean_confidence, mean_accuracy) = if count > 0 {
        (Some(conf / count as f64), Some(hits as f64 / count as f64))
    } else {
        (None, None)
    };
    BinStat {
        lower,
        upper,
        count,
        mean_confidence,
        mean_accuracy,
    }
}

/// Equal-width reliability bins covering [0, 1].
pub fn reliability_data(records: &[PredictionRecord], num_bins: usize) -> Result<Vec<BinStat>> {
    check(records, num_bins)?;
    let mut members: Vec<Vec<(f64, bool)>> = vec![Vec::new(); num_bins];
    for r in records {
        members[equal_width_bin(r.confidence, num_bins)].push((r.confidence, r.correct));
    }
    Ok(members
        .into_iter()
        .enumerate()
        .map(|(b, m)| {
            summarize(
                b as f64 / num_bins as f64,
                (b + 1) as f64 / num_bins as f64,
                m.into_iter(),
            )
        })
        .collect())
}

/// Records ordered by ascending confidence, ties by sample id.
fn sorted_ascending(records: &[PredictionRecord]) -> Vec<&PredictionRecord> {
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.confidence
            .total_cmp(&b.confidence)
            .then(a.sample_id.cmp(&b.sample_id))
    });
    sorted
}

/// Equal-mass bins. Edges are the confidences at the equal-count split points;
/// records tied with an edge go to the higher bin, so populations differ by at
/// most one unless confidences tie across a split.
pub fn adaptive_bins(records: &[PredictionRecord], num_bins: usize) -> Result<Vec<BinStat>> {
    check(records, num_bins)?;
    let sorted = sorted_ascending(records);
    let n = sorted.len();
    let (base, extra) = (n / num_bins, n % num_bins);
    let mut starts = Vec::with_capacity(num_bins);
    let mut pos = 0;
    for b in 0..num_bins {
        starts.push(pos);
        pos += base + usize::from(b < extra);
    }
    // Lower edge of bin b (b ≥ 1), or None if the chunk is empty.
    let edges: Vec<Option<f64>> = (0..num_bins)
        .map(|b| (b > 0 && starts[b] < n).then(|| sorted[starts[b]].confidence))
        .collect();
    let live: Vec<(usize, f64)> = edges
        .iter()
        .enumerate()
        .filter_map(|(b, e)| e.map(|e| (b, e)))
        .collect();
    let mut members: Vec<Vec<(f64, bool)>> = vec![Vec::new(); num_bins];
    for r in &sorted {
        let above = live.partition_point(|&(_, e)| e <= r.confidence);
        let bin = if above == 0 { 0 } else { live[above - 1].0 };
        members[bin].push((r.confidence, r.correct));
    }
    Ok(members
        .into_iter()
        .enumerate()
        .map(|(b, m)| {
            let lower = if b == 0 { 0.0 } else { edges[b].unwrap_or(1.0) };
            let upper = (b + 1..num_bins).find_map(|nb| edges[nb]).unwrap_or(1.0);
            summarize(lower, upper, m.into_iter())
        })
        .collect())
}

pub fn ece(records: &[PredictionRecord], num_bins: usize) -> Result<f64> {
    Ok(weighted_gap(&reliability_data(records, num_bins)?, records.len()))
}

pub fn aece(records: &[PredictionRecord], num_bins: usize) -> Result<f64> {
    Ok(weighted_gap(&adaptive_bins(records, num_bins)?, records.len()))
}

pub fn mce(records: &[PredictionRecord], num_bins: usize) -> Result<f64> {
    Ok(max_gap(&reliability_data(records, num_bins)?))
}

/// Risk at coverage k/S is the error rate among the k most confident
/// predictions (ties by sample id); AURC averages it over k = 1..S.
pub fn aurc(records: &[PredictionRecord]) -> Result<f64> {
    Ok(risk_coverage(records)?.iter().map(|&(_, r)| r).sum::<f64>() / records.len() as f64)
}

/// `(coverage, risk)` points for k = 1..S.
pub fn risk_coverage(records: &[PredictionRecord]) -> Result<Vec<(f64, f64)>> {
    if records.is_empty() {
        return Err(Error::domain("no prediction records"));
    }
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.sample_id.cmp(&b.sample_id))
    });
    let n = sorted.len() as f64;
    let mut errors = 0usize;
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(i, r)| {
            errors += usize::from(!r.correct);
            let k = (i + 1) as f64;
            (k / n, errors as f64 / k)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::Method;

    pub(crate) fn rec(id: usize, confidence: f64, correct: bool) -> PredictionRecord {
        PredictionRecord {
            sample_id: id,
            method: Method::Zeroshot,
            true_label: 0,
            predicted_label: usize::from(!correct),
            confidence,
            logit_min: 0.0,
            logit_max: 1.0,
            logit_mean: 0.5,
            correct,
        }
    }

    #[test]
    fn perfect_predictor_has_zero_error() {
        let recs: Vec<_> = (0..10).map(|i| rec(i, 1.0, true)).collect();
        assert_eq!(ece(&recs, 20).unwrap(), 0.0);
        assert_eq!(mce(&recs, 20).unwrap(), 0.0);
        assert_eq!(aurc(&recs).unwrap(), 0.0);
    }

    #[test]
    fn single_bin_hand_case() {
        let recs = vec![rec(0, 0.8, true), rec(1, 0.6, false)];
        assert!((ece(&recs, 1).unwrap() - 0.2).abs() < 1e-15);
        assert!((mce(&recs, 1).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn adaptive_hand_case() {
        let recs = vec![rec(0, 0.9, true), rec(1, 0.5, false)];
        assert!((aece(&recs, 2).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn adaptive_with_identical_confidences_is_single_bin() {
        let recs: Vec<_> = (0..9).map(|i| rec(i, 0.7, i % 3 == 0)).collect();
        let one = ece(&recs, 1).unwrap();
        assert!((aece(&recs, 4).unwrap() - one).abs() < 1e-15);
    }

    #[test]
    fn adaptive_populations_balanced() {
        let recs: Vec<_> = (0..103)
            .map(|i| rec(i, (i as f64 * 0.37).fract(), i % 2 == 0))
            .collect();
        let bins = adaptive_bins(&recs, 10).unwrap();
        let counts: Vec<usize> = bins.iter().map(|b| b.count).collect();
        assert_eq!(counts.iter().sum::<usize>(), 103);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn aurc_hand_cases() {
        let recs = vec![rec(0, 0.9, true), rec(1, 0.8, false)];
        assert!((aurc(&recs).unwrap() - 0.25).abs() < 1e-15);
        let wrong: Vec<_> = (0..5).map(|i| rec(i, 0.5, false)).collect();
        assert_eq!(aurc(&wrong).unwrap(), 1.0);
    }

    #[test]
    fn edge_confidences_go_to_higher_bin() {
        assert_eq!(equal_width_bin(0.5, 2), 1);
        assert_eq!(equal_width_bin(1.0, 20), 19);
        assert_eq!(equal_width_bin(0.0, 20), 0);
        assert_eq!(equal_width_bin(0.25, 4), 1);
    }

    #[test]
    fn reliability_bins_cover_unit_interval() {
        let recs: Vec<_> = (0..400).map(|i| rec(i, (i as f64 + 0.5) / 400.0, i % 3 == 0)).collect();
        let bins = reliability_data(&recs, 20).unwrap();
        assert_eq!(bins.len(), 20);
        assert_eq!(bins[0].lower, 0.0);
        assert_eq!(bins[19].upper, 1.0);
        assert!(bins.iter().all(|b| b.count == 20));
        let total: f64 = bins.iter().map(|b| b.count as f64 / 400.0 * b.gap().unwrap()).sum();
        assert!((total - ece(&recs, 20).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn empty_bin_is_flagged() {
        let bins = reliability_data(&[rec(0, 0.95, true)], 4).unwrap();
        assert_eq!(bins[0].count, 0);
        assert!(bins[0].mean_confidence.is_none() && bins[0].gap().is_none());
    }

    #[test]
    fn empty_input_is_domain_error() {
        assert!(matches!(ece(&[], 20), Err(Error::Domain(_))));
        assert!(matches!(aurc(&[]), Err(Error::Domain(_))));
    }
}
