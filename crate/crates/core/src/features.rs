//! Handcrafted per-segment feature rows for classical baselines.
//!
//! The schema is fixed; see [`feature_names`]. HRV columns are missing when a
//! segment holds fewer than two IBI events and are filled by [`impute`].

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::{ChannelKind, IbiEvent, Label};
use crate::segmentation::{Segment, Split};

const MOMENT_STATS: [&str; 8] = ["mean", "std", "min", "max", "ptp", "skew", "kurtosis", "energy"];
const EDA_STATS: [&str; 8] = ["mean", "std", "min", "max", "slope", "tonic_mean", "phasic_energy", "peak_count"];
const TEMP_STATS: [&str; 5] = ["mean", "std", "min", "max", "slope"];
const BVP_STATS: [&str; 5] = ["mean", "std", "min", "max", "energy"];
const HRV_STATS: [&str; 5] = ["mean_nn", "sdnn", "rmssd", "pnn50", "beat_count"];

pub const TONIC_WINDOW_S: f64 = 60.0;
pub const PHASIC_PEAK_MIN_US: f64 = 0.01;
pub const NN50_S: f64 = 0.05;

pub fn feature_names() -> Vec<String> {
    let mut names = Vec::new();
    for axis in ["acc_x", "acc_y", "acc_z", "acc_mag"] {
        names.extend(MOMENT_STATS.iter().map(|s| format!("{axis}_{s}")));
    }
    names.extend(EDA_STATS.iter().map(|s| format!("eda_{s}")));
    names.extend(TEMP_STATS.iter().map(|s| format!("temp_{s}")));
    names.extend(BVP_STATS.iter().map(|s| format!("bvp_{s}")));
    names.extend(HRV_STATS.iter().map(|s| format!("hrv_{s}")));
    names
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub segment_id: String,
    pub subject_id: String,
    pub label: Label,
    pub split: Split,
    /// Aligned with [`feature_names`]; `None` marks a missing value.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Moments {
    mean: f64,
    std: f64,
    min: f64,
    max: f64,
    skew: f64,
    kurtosis: f64,
    energy: f64,
}

fn moments(xs: &[f64]) -> Moments {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in xs {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let degenerate = m2 <= 1e-24 * (1.0 + mean * mean);
    Moments {
        mean,
        std: if degenerate { 0.0 } else { m2.sqrt() },
        min: xs.iter().copied().fold(f64::INFINITY, f64::min),
        max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        skew: if degenerate { 0.0 } else { m3 / m2.powf(1.5) },
        kurtosis: if degenerate { 0.0 } else { m4 / (m2 * m2) - 3.0 },
        energy: xs.iter().map(|x| x * x).sum::<f64>() / n,
    }
}

/// Least-squares slope against time in seconds.
fn slope(xs: &[f64], rate: f64) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let t_mean = (n - 1) as f64 / 2.0 / rate;
    let x_mean = xs.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &x) in xs.iter().enumerate() {
        let dt = i as f64 / rate - t_mean;
        sxy += dt * (x - x_mean);
        sxx += dt * dt;
    }
    let s = sxy / sxx;
    if s.abs() < 1e-12 * (1.0 + x_mean.abs()) {
        0.0
    } else {
        s
    }
}

/// Centered moving average with the window shrinking at the edges.
fn moving_average(xs: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut prefix = Vec::with_capacity(xs.len() + 1);
    prefix.push(0.0);
    for &x in xs {
        prefix.push(prefix.last().unwrap() + x);
    }
    (0..xs.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(xs.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hrv {
    pub mean_nn: f64,
    pub sdnn: f64,
    pub rmssd: f64,
    pub pnn50: f64,
    pub beat_count: f64,
}

pub fn hrv(events: &[IbiEvent]) -> Option<Hrv> {
    if events.len() < 2 {
        return None;
    }
    let nn: Vec<f64> = events.iter().map(|e| e.ibi_s).collect();
    let n = nn.len() as f64;
    let m = moments(&nn);
    let (mean_nn, sdnn) = (m.mean, m.std);
    let diffs: Vec<f64> = nn.windows(2).map(|w| w[1] - w[0]).collect();
    let rmssd = (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt();
    let pnn50 = diffs.iter().filter(|d| d.abs() > NN50_S).count() as f64 / diffs.len() as f64;
    Some(Hrv { mean_nn, sdnn, rmssd, pnn50, beat_count: n })
}

fn to_f64(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&v| v as f64).collect()
}

/// One feature row from a raw-unit segment.
pub fn extract_features(segment: &Segment) -> FeatureRow {
    let rate = |k: ChannelKind| segment.rates[ChannelKind::MODEL.iter().position(|&m| m == k).unwrap()] as f64;
    let mut values: Vec<Option<f64>> = Vec::with_capacity(55);
    let push_moments = |xs: &[f64], values: &mut Vec<Option<f64>>| {
        let m = moments(xs);
        values.extend([m.mean, m.std, m.min, m.max, m.max - m.min, m.skew, m.kurtosis, m.energy].map(Some));
    };

    let ax = to_f64(segment.channel(ChannelKind::AccX));
    let ay = to_f64(segment.channel(ChannelKind::AccY));
    let az = to_f64(segment.channel(ChannelKind::AccZ));
    let mag: Vec<f64> = (0..ax.len()).map(|i| (ax[i] * ax[i] + ay[i] * ay[i] + az[i] * az[i]).sqrt()).collect();
    for axis in [&ax, &ay, &az, &mag] {
        push_moments(axis, &mut values);
    }

    let eda_rate = rate(ChannelKind::Eda);
    let eda = to_f64(segment.channel(ChannelKind::Eda));
    let m = moments(&eda);
    let width = ((TONIC_WINDOW_S * eda_rate).round() as usize).max(1);
    let tonic = moving_average(&eda, width);
    let phasic: Vec<f64> = eda.iter().zip(&tonic).map(|(x, t)| x - t).collect();
    let peaks = (1..phasic.len().saturating_sub(1))
        .filter(|&i| phasic[i] > phasic[i - 1] && phasic[i] >= phasic[i + 1] && phasic[i] > PHASIC_PEAK_MIN_US)
        .count();
    values.extend(
        [
            m.mean,
            m.std,
            m.min,
            m.max,
            slope(&eda, eda_rate),
            tonic.iter().sum::<f64>() / tonic.len() as f64,
            phasic.iter().map(|p| p * p).sum::<f64>() / phasic.len() as f64,
            peaks as f64,
        ]
        .map(Some),
    );

    let temp = to_f64(segment.channel(ChannelKind::Temp));
    let m = moments(&temp);
    values.extend([m.mean, m.std, m.min, m.max, slope(&temp, rate(ChannelKind::Temp))].map(Some));

    let bvp = to_f64(segment.channel(ChannelKind::Bvp));
    let m = moments(&bvp);
    values.extend([m.mean, m.std, m.min, m.max, m.energy].map(Some));

    match hrv(&segment.ibi) {
        Some(h) => values.extend([h.mean_nn, h.sdnn, h.rmssd, h.pnn50, h.beat_count].map(Some)),
        None => values.extend([None; 5]),
    }

    FeatureRow {
        segment_id: segment.id.clone(),
        subject_id: segment.subject_id.clone(),
        label: segment.label,
        split: segment.split,
        values,
    }
}

/// Extracts rows in input order.
pub fn extract_all(segments: &[Segment]) -> Vec<FeatureRow> {
    segments.par_iter().map(extract_features).collect()
}

/// Per-column means over the given (training) rows.
pub fn column_means(train_rows: &[FeatureRow]) -> Result<Vec<f64>> {
    let names = feature_names();
    (0..names.len())
        .map(|j| {
            let (sum, n) = train_rows
                .iter()
                .filter_map(|r| r.values[j])
                .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            if n == 0 {
                Err(Error::ColumnAllMissingInTrain(names[j].clone()))
            } else {
                Ok(sum / n as f64)
            }
        })
        .collect()
}

/// Fills missing cells with the given column means.
pub fn impute(rows: &[FeatureRow], train_means: &[f64]) -> Vec<FeatureRow> {
    rows.iter()
        .map(|r| FeatureRow {
            values: r.values.iter().zip(train_means).map(|(v, m)| Some(v.unwrap_or(*m))).collect(),
            ..r.clone()
        })
        .collect()
}

pub fn write_features_csv(rows: &[FeatureRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    let mut header = vec!["segment_id".to_string(), "subject_id".into(), "label".into(), "split".into()];
    header.extend(feature_names());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.segment_id.clone(), r.subject_id.clone(), r.label.to_string(), r.split.to_string()];
        rec.extend(r.values.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features_csv(path: &Path) -> Result<Vec<FeatureRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = || Error::MalformedRow(i + 2);
        let values = rec
            .iter()
            .skip(4)
            .map(|s| if s.is_empty() { Ok(None) } else { s.parse().map(Some).map_err(|_| bad()) })
            .collect::<Result<Vec<_>>>()?;
        rows.push(FeatureRow {
            segment_id: rec[0].to_string(),
            subject_id: rec[1].to_string(),
            label: Label::parse(&rec[2]).ok_or_else(bad)?,
            split: Split::parse(&rec[3]).ok_or_else(bad)?,
            values,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn segment(channels: [Vec<f32>; 6], ibi: Vec<IbiEvent>) -> Segment {
        Segment {
            id: "seg".into(),
            recording_id: "r".into(),
            subject_id: "s".into(),
            dataset_tag: "t".into(),
            start_s: 0,
            omega_s: 4,
            rates: [2, 2, 2, 4, 2, 1],
            channels,
            label: Label::Euthymia,
            split: Split::Train,
            ssl_split: Split::None,
            ibi,
        }
    }

    fn col(row: &FeatureRow, name: &str) -> Option<f64> {
        row.values[feature_names().iter().position(|n| n == name).unwrap()]
    }

    #[test]
    fn schema_size() {
        assert_eq!(feature_names().len(), 55);
        let row = extract_features(&segment(std::array::from_fn(|c| vec![1.0; 4 * [2, 2, 2, 4, 2, 1][c]]), vec![]));
        assert_eq!(row.values.len(), 55);
    }

    #[test]
    fn constant_channel() {
        let row = extract_features(&segment(std::array::from_fn(|c| vec![3.0; 4 * [2, 2, 2, 4, 2, 1][c]]), vec![]));
        assert_eq!(col(&row, "temp_mean"), Some(3.0));
        assert_eq!(col(&row, "temp_std"), Some(0.0));
        assert_eq!(col(&row, "temp_slope"), Some(0.0));
        assert_eq!(col(&row, "acc_x_ptp"), Some(0.0));
        assert_eq!(col(&row, "eda_peak_count"), Some(0.0));
        assert_eq!(col(&row, "hrv_rmssd"), None);
    }

    #[test]
    fn regular_ibi() {
        let ev = [(1.0, 0.8), (1.8, 0.8), (2.6, 0.8)].map(|(o, i)| IbiEvent { offset_s: o, ibi_s: i });
        let h = hrv(&ev).unwrap();
        assert!((h.mean_nn - 0.8).abs() < 1e-12);
        assert_eq!((h.sdnn, h.rmssd, h.pnn50, h.beat_count), (0.0, 0.0, 0.0, 3.0));
        assert!(hrv(&ev[..1]).is_none());
    }

    #[test]
    fn irregular_ibi_by_hand() {
        let ev = [0.8, 0.9, 0.7].map(|i| IbiEvent { offset_s: i, ibi_s: i });
        let mut ev = ev.to_vec();
        ev.iter_mut().enumerate().for_each(|(k, e)| e.offset_s = k as f64);
        let h = hrv(&ev).unwrap();
        // diffs 0.1, -0.2 -> rmssd sqrt((0.01 + 0.04)/2)
        assert!((h.rmssd - 0.025f64.sqrt()).abs() < 1e-12);
        assert_eq!(h.pnn50, 1.0);
        assert!((h.sdnn - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn slope_of_ramp() {
        let xs: Vec<f64> = (0..8).map(|i| 2.0 * i as f64 / 4.0).collect();
        assert!((slope(&xs, 4.0) - 2.0).abs() < 1e-12);
    }

    fn row(values: Vec<Option<f64>>, split: Split) -> FeatureRow {
        FeatureRow { segment_id: "x".into(), subject_id: "s".into(), label: Label::Euthymia, split, values }
    }

    #[test]
    fn imputation() {
        let n = feature_names().len();
        let mut a = vec![Some(1.0); n];
        a[n - 3] = Some(0.04);
        let mut b = vec![Some(1.0); n];
        b[n - 3] = Some(0.06);
        let mut c = vec![Some(2.0); n];
        c[n - 3] = None;
        let train = vec![row(a, Split::Train), row(b, Split::Train)];
        let means = column_means(&train).unwrap();
        assert!((means[n - 3] - 0.05).abs() < 1e-12);
        let filled = impute(&[row(c, Split::Test)], &means);
        assert!((filled[0].values[n - 3].unwrap() - 0.05).abs() < 1e-12);
        assert_eq!(impute(&train, &means), train);

        let mut d = vec![Some(1.0); n];
        d[5] = None;
        assert!(matches!(column_means(&[row(d, Split::Train)]), Err(Error::ColumnAllMissingInTrain(_))));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        let n = feature_names().len();
        let rows: Vec<FeatureRow> =
            (0..3).map(|i| row((0..n).map(|j| Some(j as f64 * 0.123456789 + i as f64)).collect(), Split::Val)).collect();
        write_features_csv(&rows, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 4);
        let back = read_features_csv(&p).unwrap();
        for (a, b) in rows.iter().zip(&back) {
            for (x, y) in a.values.iter().zip(&b.values) {
                let (x, y) = (x.unwrap(), y.unwrap());
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-12));
            }
        }
        write_features_csv(&[], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 1);
    }

    proptest! {
        #[test]
        fn shift_moves_location_only(xs in prop::collection::vec(-5.0f64..5.0, 4..64), k in -100.0f64..100.0) {
            let a = moments(&xs);
            let shifted: Vec<f64> = xs.iter().map(|x| x + k).collect();
            let b = moments(&shifted);
            prop_assert!((b.mean - a.mean - k).abs() < 1e-9);
            prop_assert!((b.min - a.min - k).abs() < 1e-9);
            prop_assert!((b.max - a.max - k).abs() < 1e-9);
            prop_assert!((b.std - a.std).abs() < 1e-9);
            if a.std > 1e-3 {
                prop_assert!((b.skew - a.skew).abs() < 1e-6);
                prop_assert!((b.kurtosis - a.kurtosis).abs() < 1e-6);
            }
        }

        #[test]
        fn regular_ibi_has_no_variability(ibi in 0.3f64..1.5, n in 2usize..40) {
            let ev: Vec<IbiEvent> = (0..n).map(|i| IbiEvent { offset_s: i as f64 * ibi, ibi_s: ibi }).collect();
            let h = hrv(&ev).unwrap();
            prop_assert!(h.rmssd == 0.0 && h.sdnn < 1e-12);
        }
    }
}
