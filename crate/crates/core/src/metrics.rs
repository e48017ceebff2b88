//! Segment- and subject-level classification metrics. The positive class is
//! the acute episode (label 1).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPrediction {
    pub segment_id: String,
    pub subject_id: String,
    pub true_label: u8,
    pub p_acute: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when only one class is present.
    pub auroc: Option<f64>,
}

/// Area under the ROC curve from average ranks; ties count one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

/// Metrics from thresholded class predictions plus scores for AUROC.
pub fn binary_metrics(predicted: &[u8], scores: &[f64], labels: &[u8]) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    if predicted.len() != labels.len() || scores.len() != labels.len() {
        return Err(Error::LengthMismatch { expected: labels.len(), actual: predicted.len().min(scores.len()) });
    }
    let (mut tp, mut fp, mut fneg, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in predicted.iter().zip(labels) {
        correct += usize::from(p == y);
        match (p, y) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(Metrics {
        n: labels.len(),
        accuracy: correct as f64 / labels.len() as f64,
        precision,
        recall,
        f1,
        auroc: auroc(scores, labels),
    })
}

pub fn segment_metrics(predictions: &[SegmentPrediction], threshold: f64) -> Result<Metrics> {
    let predicted: Vec<u8> = predictions.iter().map(|p| u8::from(p.p_acute > threshold)).collect();
    let scores: Vec<f64> = predictions.iter().map(|p| p.p_acute).collect();
    let labels: Vec<u8> = predictions.iter().map(|p| p.true_label).collect();
    binary_metrics(&predicted, &scores, &labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPrediction {
    pub subject_id: String,
    pub true_label: u8,
    pub n_segments: usize,
    /// Mean segment probability.
    pub p_acute: f64,
    /// Majority vote, ties broken by `p_acute > 0.5`.
    pub predicted: u8,
    /// Fraction of this subject's segments classified correctly.
    pub correct_fraction: f64,
}

/// Groups by subject in id order. A subject's label is its segments' label.
pub fn subject_aggregate(predictions: &[SegmentPrediction]) -> Result<Vec<SubjectPrediction>> {
    let mut groups: BTreeMap<&str, Vec<&SegmentPrediction>> = BTreeMap::new();
    for p in predictions {
        groups.entry(p.subject_id.as_str()).or_default().push(p);
    }
    groups
        .into_iter()
        .map(|(subject, segs)| {
            let y = segs[0].true_label;
            if segs.iter().any(|s| s.true_label != y) {
                return Err(Error::Config(format!("subject {subject} has segments with different labels")));
            }
            let n = segs.len();
            let votes = segs.iter().filter(|s| s.p_acute > THRESHOLD).count();
            let p = segs.iter().map(|s| s.p_acute).sum::<f64>() / n as f64;
            let predicted = match (2 * votes).cmp(&n) {
                std::cmp::Ordering::Greater => 1,
                std::cmp::Ordering::Less => 0,
                std::cmp::Ordering::Equal => u8::from(p > THRESHOLD),
            };
            let correct = segs.iter().filter(|s| u8::from(s.p_acute > THRESHOLD) == s.true_label).count();
            Ok(SubjectPrediction {
                subject_id: subject.to_string(),
                true_label: y,
                n_segments: n,
                p_acute: p,
                predicted,
                correct_fraction: correct as f64 / n as f64,
            })
        })
        .collect()
}

pub fn subject_metrics(subjects: &[SubjectPrediction]) -> Result<Metrics> {
    let predicted: Vec<u8> = subjects.iter().map(|s| s.predicted).collect();
    let scores: Vec<f64> = subjects.iter().map(|s| s.p_acute).collect();
    let labels: Vec<u8> = subjects.iter().map(|s| s.true_label).collect();
    binary_metrics(&predicted, &scores, &labels)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub segment: Metrics,
    pub subject: Metrics,
    pub subjects: Vec<SubjectPrediction>,
}

pub fn evaluate(predictions: &[SegmentPrediction]) -> Result<MetricsReport> {
    let segment = segment_metrics(predictions, THRESHOLD)?;
    let subjects = subject_aggregate(predictions)?;
    let subject = subject_metrics(&subjects)?;
    Ok(MetricsReport { segment, subject, subjects })
}

fn write_metrics(s: &mut String, prefix: &str, m: &Metrics) {
    let _ = writeln!(s, "{prefix}.n: {}", m.n);
    let _ = writeln!(s, "{prefix}.accuracy: {:.6}", m.accuracy);
    let _ = writeln!(s, "{prefix}.precision: {:.6}", m.precision);
    let _ = writeln!(s, "{prefix}.recall: {:.6}", m.recall);
    let _ = writeln!(s, "{prefix}.f1: {:.6}", m.f1);
    match m.auroc {
        Some(a) => {
            let _ = writeln!(s, "{prefix}.auroc: {a:.6}");
        }
        None => {
            let _ = writeln!(s, "{prefix}.auroc: missing");
        }
    }
}

impl MetricsReport {
    /// `key: value` lines followed by a tab-separated per-subject table.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# positive class: acute episode (label 1), threshold 0.5\n");
        write_metrics(&mut s, "segment", &self.segment);
        write_metrics(&mut s, "subject", &self.subject);
        s.push_str("\nsubject_id\ttrue_label\tn_segments\tp_acute\tpredicted\tcorrect_fraction\n");
        for p in &self.subjects {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.6}\t{}\t{:.6}",
                p.subject_id, p.true_label, p.n_segments, p.p_acute, p.predicted, p.correct_fraction
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auroc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    fn seg(subject: &str, y: u8, p: f64) -> SegmentPrediction {
        SegmentPrediction { segment_id: format!("{subject}-{p}"), subject_id: subject.into(), true_label: y, p_acute: p }
    }

    #[test]
    fn spec_examples() {
        let m = binary_metrics(&[1, 1, 0], &[0.9, 0.8, 0.1], &[1, 0, 0]).unwrap();
        assert!((m.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]), Some(1.0));
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]), Some(0.75));
        assert_eq!(auroc(&[0.1, 0.4], &[1, 1]), None);
    }

    #[test]
    fn no_predicted_positive_gives_zero_precision() {
        let m = binary_metrics(&[0, 0], &[0.1, 0.2], &[1, 0]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn subject_votes() {
        let s = subject_aggregate(&[seg("a", 1, 0.9), seg("a", 1, 0.8), seg("a", 1, 0.2)]).unwrap();
        assert_eq!(s[0].predicted, 1);
        let s = subject_aggregate(&[seg("a", 1, 0.9), seg("a", 1, 0.2)]).unwrap();
        assert!((s[0].p_acute - 0.55).abs() < 1e-12);
        assert_eq!(s[0].predicted, 1);
        let s = subject_aggregate(&[seg("a", 0, 0.3)]).unwrap();
        assert_eq!((s[0].predicted, s[0].p_acute), (0, 0.3));
    }

    #[test]
    fn fifty_eight_of_sixty_four() {
        let subjects: Vec<SubjectPrediction> = (0..64)
            .map(|i| SubjectPrediction {
                subject_id: format!("{i}"),
                true_label: (i % 2) as u8,
                n_segments: 1,
                p_acute: 0.5,
                predicted: if i < 58 { (i % 2) as u8 } else { 1 - (i % 2) as u8 },
                correct_fraction: 1.0,
            })
            .collect();
        let m = subject_metrics(&subjects).unwrap();
        assert!((m.accuracy * 100.0 - 90.63).abs() < 0.01);
    }

    #[test]
    fn report_text_lists_subjects() {
        let r = evaluate(&[seg("a", 1, 0.9), seg("b", 0, 0.1)]).unwrap();
        let t = r.to_text();
        assert!(t.contains("segment.accuracy: 1.000000"));
        assert!(t.contains("subject.auroc: 1.000000"));
        assert!(t.lines().any(|l| l.starts_with("b\t0\t1\t")));
    }

    proptest! {
        #[test]
        fn auroc_matches_pairs(raw in prop::collection::vec((0u8..20, any::<bool>()), 2..200)) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 20.0).collect();
            let labels: Vec<u8> = raw.iter().map(|(_, y)| u8::from(*y)).collect();
            match auroc(&scores, &labels) {
                Some(a) => prop_assert!((a - brute_auroc(&scores, &labels)).abs() < 1e-12),
                None => prop_assert!(labels.iter().all(|&y| y == labels[0])),
            }
        }

        #[test]
        fn majority_matches_counting(ps in prop::collection::vec(0.0f64..1.0, 1..30), y in 0u8..2) {
            let segs: Vec<SegmentPrediction> = ps.iter().map(|&p| seg("s", y, p)).collect();
            let s = &subject_aggregate(&segs).unwrap()[0];
            let ones = ps.iter().filter(|&&p| p > 0.5).count();
            let zeros = ps.len() - ones;
            let want = if ones > zeros { 1 } else if zeros > ones { 0 } else { u8::from(s.p_acute > 0.5) };
            prop_assert_eq!(s.predicted, want);
        }
    }
}
