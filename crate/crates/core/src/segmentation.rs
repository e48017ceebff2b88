//! Window slicing of wake time, target-task and SSL splits, and channel-wise
//! standardization.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::{ChannelKind, IbiEvent, Label, Recording};
use crate::wear_state::{WearState, WearStateTimeline};

pub const STD_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentationConfig {
    /// Segment length in seconds.
    pub omega_s: usize,
    /// Step between consecutive segment starts in seconds.
    pub delta_s: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig { omega_s: 512, delta_s: 128 }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta_s == 0 || self.delta_s > self.omega_s {
            return Err(Error::Config(format!(
                "need 0 < delta ({}) <= omega ({})",
                self.delta_s, self.omega_s
            )));
        }
        Ok(())
    }

    /// Number of windows that fit in a run of `len` seconds.
    pub fn windows_in_run(&self, len: usize) -> usize {
        if len < self.omega_s {
            0
        } else {
            (len - self.omega_s) / self.delta_s + 1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
    None,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            "none" => Some(Split::None),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A fixed-length multirate window of wake data. Channels follow
/// [`ChannelKind::MODEL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub id: String,
    pub recording_id: String,
    pub subject_id: String,
    pub dataset_tag: String,
    pub start_s: usize,
    pub omega_s: usize,
    pub rates: [usize; 6],
    pub channels: [Vec<f32>; 6],
    pub label: Label,
    /// Target-task split.
    pub split: Split,
    /// Pretraining split: `Train`, `Val` or `None`.
    pub ssl_split: Split,
    /// IBI events with offsets relative to the segment start.
    pub ibi: Vec<IbiEvent>,
}

impl Segment {
    pub fn channel(&self, kind: ChannelKind) -> &[f32] {
        let i = ChannelKind::MODEL.iter().position(|&k| k == kind).expect("model channel");
        &self.channels[i]
    }

    pub fn end_s(&self) -> usize {
        self.start_s + self.omega_s
    }
}

pub fn segment_id(recording_id: &str, start_s: usize) -> String {
    format!("{recording_id}_{start_s:07}")
}

/// Slices every maximal wake run into windows of `omega_s` seconds spaced
/// `delta_s` apart. Windows never leave their run.
pub fn slice_segments(
    recording: &Recording,
    timeline: &WearStateTimeline,
    config: &SegmentationConfig,
) -> Result<Vec<Segment>> {
    config.validate()?;
    let mut rates = [0usize; 6];
    for (slot, kind) in rates.iter_mut().zip(ChannelKind::MODEL) {
        let r = recording.channel(kind)?.rate_hz;
        if r.fract() != 0.0 {
            return Err(Error::Config(format!("{kind} rate {r} is not a whole number")));
        }
        *slot = r as usize;
    }
    let duration = recording.duration_s().floor() as usize;
    if timeline.states.len() != duration {
        return Err(Error::LengthMismatch { expected: duration, actual: timeline.states.len() });
    }
    let ibi = recording.ibi.as_ref().map(|s| s.events.as_slice()).unwrap_or(&[]);
    let mut out = Vec::new();
    for (run_start, len) in timeline.runs_of(WearState::Wake) {
        for k in 0..config.windows_in_run(len) {
            let start_s = run_start + k * config.delta_s;
            let end_s = start_s + config.omega_s;
            let mut channels: [Vec<f32>; 6] = Default::default();
            for (i, kind) in ChannelKind::MODEL.into_iter().enumerate() {
                let series = recording.channel(kind)?;
                let (a, b) = (start_s * rates[i], end_s * rates[i]);
                channels[i] = series.values[a..b].iter().map(|&v| v as f32).collect();
            }
            let seg_ibi = ibi
                .iter()
                .filter(|e| e.offset_s >= start_s as f64 && e.offset_s < end_s as f64)
                .map(|e| IbiEvent { offset_s: e.offset_s - start_s as f64, ibi_s: e.ibi_s })
                .collect();
            out.push(Segment {
                id: segment_id(&recording.id, start_s),
                recording_id: recording.id.clone(),
                subject_id: recording.subject_id.clone(),
                dataset_tag: recording.dataset_tag.clone(),
                start_s,
                omega_s: config.omega_s,
                rates,
                channels,
                label: recording.label,
                split: Split::None,
                ssl_split: Split::None,
                ibi: seg_ibi,
            });
        }
    }
    Ok(out)
}

pub const TRAIN_FRACTION: f64 = 0.70;
pub const VAL_END_FRACTION: f64 = 0.85;

/// Split boundaries `(span_start, train_end, val_end, span_end)` in seconds.
pub fn split_boundaries(segments: &[Segment]) -> Option<(f64, f64, f64, f64)> {
    let lo = segments.iter().map(|s| s.start_s).min()? as f64;
    let hi = segments.iter().map(|s| s.end_s()).max()? as f64;
    let span = hi - lo;
    Some((lo, lo + TRAIN_FRACTION * span, lo + VAL_END_FRACTION * span, hi))
}

/// Tags segments of one labelled recording with train/val/test along time.
/// Segments that straddle a boundary are tagged [`Split::None`].
pub fn time_split(segments: &mut [Segment]) {
    let Some((lo, b1, b2, hi)) = split_boundaries(segments) else {
        return;
    };
    for seg in segments.iter_mut() {
        let (s, e) = (seg.start_s as f64, seg.end_s() as f64);
        seg.split = if s >= lo && e <= b1 {
            Split::Train
        } else if s >= b1 && e <= b2 {
            Split::Val
        } else if s >= b2 && e <= hi {
            Split::Test
        } else {
            Split::None
        };
    }
}

pub const SSL_TRAIN_FRACTION: f64 = 0.85;

/// Seeded partition of recording ids into SSL train and validation sets.
pub fn ssl_split(recording_ids: &[String], seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    let n = recording_ids.len();
    if n < 2 {
        return Err(Error::TooFewRecordings(n));
    }
    let mut ids = recording_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::TooFewRecordings(ids.len()));
    }
    let n = ids.len();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((SSL_TRAIN_FRACTION * n as f64).round() as usize).clamp(1, n - 1);
    let val = ids.split_off(n_train);
    ids.sort();
    let mut val = val;
    val.sort();
    Ok((ids, val))
}

/// Channel-wise mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: [f64; 6],
    pub std: [f64; 6],
}

impl Standardizer {
    pub fn identity() -> Self {
        Standardizer { mean: [0.0; 6], std: [1.0; 6] }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("channel\tmean\tstd\n");
        for (i, kind) in ChannelKind::MODEL.iter().enumerate() {
            out.push_str(&format!("{}\t{}\t{}\n", kind, self.mean[i], self.std[i]));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut st = Standardizer::identity();
        let mut seen = [false; 6];
        for (i, line) in text.lines().enumerate().skip(1) {
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || Error::MalformedRow(i + 1);
            if cols.len() != 3 {
                return Err(bad());
            }
            let idx = ChannelKind::MODEL.iter().position(|k| k.name() == cols[0]).ok_or_else(bad)?;
            st.mean[idx] = cols[1].parse().map_err(|_| bad())?;
            st.std[idx] = cols[2].parse().map_err(|_| bad())?;
            seen[idx] = true;
        }
        if seen.iter().all(|&s| s) {
            Ok(st)
        } else {
            Err(Error::Store("standardizer is missing channels".into()))
        }
    }
}

pub fn fit_standardizer<'a>(segments: impl IntoIterator<Item = &'a Segment> + Clone) -> Result<Standardizer> {
    let mut sum = [0.0f64; 6];
    let mut count = [0usize; 6];
    for seg in segments.clone() {
        for c in 0..6 {
            sum[c] += seg.channels[c].iter().map(|&v| v as f64).sum::<f64>();
            count[c] += seg.channels[c].len();
        }
    }
    if count.iter().any(|&n| n == 0) {
        return Err(Error::EmptyInput);
    }
    let mean: [f64; 6] = std::array::from_fn(|c| sum[c] / count[c] as f64);
    let mut ss = [0.0f64; 6];
    for seg in segments {
        for c in 0..6 {
            ss[c] += seg.channels[c].iter().map(|&v| (v as f64 - mean[c]).powi(2)).sum::<f64>();
        }
    }
    let std = std::array::from_fn(|c| {
        let s = (ss[c] / count[c] as f64).sqrt();
        if s < STD_EPS {
            STD_EPS
        } else {
            s
        }
    });
    Ok(Standardizer { mean, std })
}

pub fn standardize(segment: &Segment, st: &Standardizer) -> Segment {
    let mut out = segment.clone();
    for (c, ch) in out.channels.iter_mut().enumerate() {
        for v in ch.iter_mut() {
            *v = ((*v as f64 - st.mean[c]) / st.std[c]) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{ChannelRates, ChannelSeries};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn recording(secs: usize) -> Recording {
        let rates = ChannelRates::default();
        let channels: BTreeMap<_, _> = ChannelKind::MODEL
            .iter()
            .map(|&k| {
                let r = rates.get(k);
                let n = (r * secs as f64) as usize;
                (k, ChannelSeries { kind: k, start_epoch: 0.0, rate_hz: r, values: (0..n).map(|i| i as f64 / r).collect() })
            })
            .collect();
        Recording {
            id: "rec".into(),
            subject_id: "s".into(),
            dataset_tag: "target".into(),
            label: Label::AcuteEpisode,
            channels,
            ibi: None,
        }
    }

    fn wake_timeline(states: Vec<WearState>) -> WearStateTimeline {
        WearStateTimeline { recording_id: "rec".into(), states }
    }

    fn count_for_run(len: usize) -> usize {
        let rec = recording(len + 20);
        let mut states = vec![WearState::OffBody; 10];
        states.extend(vec![WearState::Wake; len]);
        states.extend(vec![WearState::OffBody; 10]);
        slice_segments(&rec, &wake_timeline(states), &SegmentationConfig::default()).unwrap().len()
    }

    #[test]
    fn window_counts() {
        assert_eq!(count_for_run(512), 1);
        assert_eq!(count_for_run(1024), 5);
        assert_eq!(count_for_run(511), 0);
    }

    #[test]
    fn segments_carry_label_and_exact_lengths() {
        let rec = recording(700);
        let segs = slice_segments(&rec, &wake_timeline(vec![WearState::Wake; 700]), &SegmentationConfig::default()).unwrap();
        assert_eq!(segs.len(), 2);
        for s in &segs {
            assert_eq!(s.label, Label::AcuteEpisode);
            for (c, ch) in s.channels.iter().enumerate() {
                assert_eq!(ch.len(), 512 * s.rates[c]);
            }
        }
        // BVP sample value encodes its time in seconds
        assert_eq!(segs[1].channel(ChannelKind::Bvp)[0], 128.0);
    }

    #[test]
    fn windows_do_not_bridge_sleep() {
        let rec = recording(1100);
        let mut states = vec![WearState::Wake; 540];
        states.extend(vec![WearState::Sleep; 20]);
        states.extend(vec![WearState::Wake; 540]);
        let segs = slice_segments(&rec, &wake_timeline(states), &SegmentationConfig::default()).unwrap();
        assert_eq!(segs.iter().map(|s| s.start_s).collect::<Vec<_>>(), vec![0, 560]);
    }

    fn seg_at(start_s: usize, omega_s: usize) -> Segment {
        Segment {
            id: segment_id("r", start_s),
            recording_id: "r".into(),
            subject_id: "s".into(),
            dataset_tag: "t".into(),
            start_s,
            omega_s,
            rates: [1; 6],
            channels: Default::default(),
            label: Label::Euthymia,
            split: Split::None,
            ssl_split: Split::None,
            ibi: vec![],
        }
    }

    #[test]
    fn time_split_assigns_by_containment() {
        // span [0, 1000): train < 700, val [700, 850), test >= 850
        let mut segs: Vec<Segment> = [0, 500, 650, 700, 800, 850, 900].iter().map(|&s| seg_at(s, 100)).collect();
        time_split(&mut segs);
        let got: Vec<Split> = segs.iter().map(|s| s.split).collect();
        use Split::*;
        assert_eq!(got, vec![Train, Train, None, Val, None, Test, Test]);
    }

    #[test]
    fn ssl_split_counts_and_determinism() {
        let ids: Vec<String> = (0..20).map(|i| format!("u{i:02}")).collect();
        let (tr, va) = ssl_split(&ids, 7).unwrap();
        assert_eq!((tr.len(), va.len()), (17, 3));
        assert_eq!(ssl_split(&ids, 7).unwrap(), (tr.clone(), va.clone()));
        assert!(tr.iter().all(|t| !va.contains(t)));
        let (a, b) = ssl_split(&ids[..2], 1).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        assert!(matches!(ssl_split(&ids[..1], 1), Err(Error::TooFewRecordings(1))));
    }

    fn seg_with(values: [Vec<f32>; 6]) -> Segment {
        let mut s = seg_at(0, 1);
        s.channels = values;
        s
    }

    #[test]
    fn standardizer_statistics() {
        let s = seg_with(std::array::from_fn(|_| vec![1.0, 2.0, 3.0]));
        let st = fit_standardizer([&s]).unwrap();
        assert!((st.mean[0] - 2.0).abs() < 1e-12);
        assert!((st.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let c = seg_with(std::array::from_fn(|_| vec![0.1; 5]));
        let st = fit_standardizer([&c]).unwrap();
        assert_eq!(st.std[3], STD_EPS);
        assert!(standardize(&c, &st).channels[3].iter().all(|v| v.abs() < 1e-6));
        assert!(matches!(fit_standardizer(std::iter::empty::<&Segment>()), Err(Error::EmptyInput)));
    }

    #[test]
    fn standardize_by_hand() {
        let s = seg_with(std::array::from_fn(|_| vec![2.0, 4.0, 4.0, 6.0]));
        let st = Standardizer { mean: [4.0; 6], std: [2.0; 6] };
        assert_eq!(standardize(&s, &st).channels[0], vec![-1.0, 0.0, 0.0, 1.0]);
        let st2 = fit_standardizer([&s]).unwrap();
        // population std of [2,4,4,6] is sqrt(2)
        assert!((st2.std[0] - 2f64.sqrt()).abs() < 1e-12);
        let once = standardize(&s, &st2);
        let refit = fit_standardizer([&once]).unwrap();
        assert!(refit.mean[0].abs() < 1e-6 && (refit.std[0] - 1.0).abs() < 1e-6);
        let twice = standardize(&once, &refit);
        for (a, b) in once.channels[0].iter().zip(&twice.channels[0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn standardizer_tsv_round_trip() {
        let st = Standardizer { mean: [0.5, 1.0, -2.0, 3.25, 1e-3, 33.0], std: [1.0, 2.0, 0.1, 7.0, 0.5, 0.25] };
        assert_eq!(Standardizer::from_tsv(&st.to_tsv()).unwrap(), st);
    }

    proptest! {
        #[test]
        fn window_count_matches_enumeration(len in 0usize..3000, omega in 1usize..600, step_frac in 0.0f64..1.0) {
            let delta = 1 + ((omega - 1) as f64 * step_frac) as usize;
            let cfg = SegmentationConfig { omega_s: omega, delta_s: delta };
            let brute = (0..len).step_by(delta).filter(|s| s + omega <= len).count();
            prop_assert_eq!(cfg.windows_in_run(len), brute);
        }

        #[test]
        fn standardized_moments(vals in prop::collection::vec(-50.0f32..50.0, 8..200)) {
            let s = seg_with(std::array::from_fn(|c| vals.iter().map(|v| v * (c as f32 + 1.0) + c as f32).collect()));
            let st = fit_standardizer([&s]).unwrap();
            prop_assume!(st.std.iter().all(|&x| x > 1e-3));
            let z = standardize(&s, &st);
            let refit = fit_standardizer([&z]).unwrap();
            for c in 0..6 {
                prop_assert!(refit.mean[c].abs() < 1e-6);
                prop_assert!((refit.std[c] - 1.0).abs() < 1e-6);
            }
        }
    }
}
