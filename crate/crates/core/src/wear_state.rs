//! Per-second OffBody / Sleep / Wake labelling.
//!
//! Off-body comes from EDA and TEMP range rules evaluated on every native
//! sample. Sleep follows the Van Hees arm-angle heuristic: 5 s epochs, and a
//! sustained run of epochs with no angle change above 5 degrees lasting at
//! least 5 minutes.

use std::fmt;

use crate::error::{Error, Result};
use crate::ingest::{ChannelKind, ChannelSeries, Recording};

pub const EDA_MIN_US: f64 = 0.05;
pub const EDA_MAX_US: f64 = 100.0;
pub const TEMP_MIN_C: f64 = 30.0;
pub const TEMP_MAX_C: f64 = 40.0;

pub const ANGLE_EPOCH_S: usize = 5;
pub const ANGLE_CHANGE_DEG: f64 = 5.0;
/// 300 s of 5 s epochs.
pub const SLEEP_MIN_EPOCHS: usize = 60;
pub const MIN_WEAR_S: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WearState {
    OffBody,
    Sleep,
    Wake,
}

impl WearState {
    pub fn code(self) -> char {
        match self {
            WearState::OffBody => 'O',
            WearState::Sleep => 'S',
            WearState::Wake => 'W',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        match c {
            'O' => Some(WearState::OffBody),
            'S' => Some(WearState::Sleep),
            'W' => Some(WearState::Wake),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WearStateTimeline {
    pub recording_id: String,
    pub states: Vec<WearState>,
}

impl fmt::Display for WearStateTimeline {
    /// Export format: a `# recording_id` header, then one state code per line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# {}", self.recording_id)?;
        for s in &self.states {
            writeln!(f, "{}", s.code())?;
        }
        Ok(())
    }
}

impl WearStateTimeline {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let head = lines.next().ok_or(Error::EmptyFile)?;
        let recording_id = head.strip_prefix("# ").ok_or(Error::MalformedRow(1))?.to_string();
        let states = lines
            .enumerate()
            .map(|(i, l)| {
                let mut chars = l.trim().chars();
                match (chars.next().and_then(WearState::from_code), chars.next()) {
                    (Some(s), None) => Ok(s),
                    _ => Err(Error::MalformedRow(i + 2)),
                }
            })
            .collect::<Result<_>>()?;
        Ok(WearStateTimeline { recording_id, states })
    }

    /// Maximal runs of `state` as `(start, len)` pairs.
    pub fn runs_of(&self, state: WearState) -> Vec<(usize, usize)> {
        runs(&self.states, |s| *s == state)
    }
}

pub(crate) fn runs<T>(xs: &[T], pred: impl Fn(&T) -> bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < xs.len() {
        if pred(&xs[i]) {
            let start = i;
            while i < xs.len() && pred(&xs[i]) {
                i += 1;
            }
            out.push((start, i - start));
        } else {
            i += 1;
        }
    }
    out
}

fn eda_off(v: f64) -> bool {
    v < EDA_MIN_US || v > EDA_MAX_US
}

fn temp_off(v: f64) -> bool {
    !(TEMP_MIN_C..=TEMP_MAX_C).contains(&v)
}

fn seconds(series: &ChannelSeries) -> usize {
    (series.values.len() as f64 / series.rate_hz).floor() as usize
}

/// Per-second off-body flags. A second is off-body when any EDA or TEMP
/// sample falling inside it violates its range.
pub fn detect_offbody(eda: &ChannelSeries, temp: &ChannelSeries) -> Vec<bool> {
    let n = seconds(eda).min(seconds(temp));
    (0..n)
        .map(|s| {
            let (a, b) = (s as f64, s as f64 + 1.0);
            eda.values[eda.index_range(a, b)].iter().any(|&v| eda_off(v))
                || temp.values[temp.index_range(a, b)].iter().any(|&v| temp_off(v))
        })
        .collect()
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Arm angle in degrees from per-axis medians of one epoch.
pub fn arm_angle(x: &[f64], y: &[f64], z: &[f64]) -> f64 {
    debug_assert!(!x.is_empty() && x.len() == y.len() && y.len() == z.len());
    let mx = median(&mut x.to_vec());
    let my = median(&mut y.to_vec());
    let mz = median(&mut z.to_vec());
    let horiz = (mx * mx + my * my).sqrt();
    if horiz == 0.0 {
        return if mz > 0.0 {
            90.0
        } else if mz < 0.0 {
            -90.0
        } else {
            0.0
        };
    }
    (mz / horiz).atan().to_degrees()
}

/// One arm angle per 5 s epoch. A trailing partial epoch is kept.
pub fn angle_series(acc: [&ChannelSeries; 3]) -> Vec<f64> {
    let [x, y, z] = acc;
    let total = seconds(x).min(seconds(y)).min(seconds(z));
    (0..total.div_ceil(ANGLE_EPOCH_S))
        .map(|e| {
            let a = (e * ANGLE_EPOCH_S) as f64;
            let b = (((e + 1) * ANGLE_EPOCH_S).min(total)) as f64;
            let r = x.index_range(a, b);
            arm_angle(&x.values[r.clone()], &y.values[r.clone()], &z.values[r])
        })
        .collect()
}

/// Marks epochs inside a chain of at least [`SLEEP_MIN_EPOCHS`] consecutive
/// epochs whose successive angle changes never exceed 5 degrees.
pub fn sleep_from_angles(angles: &[f64]) -> Vec<bool> {
    let mut out = vec![false; angles.len()];
    let mut start = 0;
    for i in 1..=angles.len() {
        let breaks = i == angles.len() || (angles[i] - angles[i - 1]).abs() > ANGLE_CHANGE_DEG;
        if breaks {
            if i - start >= SLEEP_MIN_EPOCHS {
                out[start..i].iter_mut().for_each(|s| *s = true);
            }
            start = i;
        }
    }
    out
}

/// Per-epoch sleep flags from aligned ACC axes.
pub fn detect_sleep(acc: [&ChannelSeries; 3]) -> Vec<bool> {
    sleep_from_angles(&angle_series(acc))
}

/// Combines per-second off-body flags with per-epoch sleep flags.
/// Precedence is OffBody, then Sleep, then Wake.
pub fn compose_timeline(recording_id: &str, offbody: &[bool], sleep_epochs: &[bool]) -> Result<WearStateTimeline> {
    if sleep_epochs.len() != offbody.len().div_ceil(ANGLE_EPOCH_S) {
        return Err(Error::LengthMismatch {
            expected: offbody.len().div_ceil(ANGLE_EPOCH_S),
            actual: sleep_epochs.len(),
        });
    }
    let states = offbody
        .iter()
        .enumerate()
        .map(|(s, &off)| {
            if off {
                WearState::OffBody
            } else if sleep_epochs[s / ANGLE_EPOCH_S] {
                WearState::Sleep
            } else {
                WearState::Wake
            }
        })
        .collect();
    Ok(WearStateTimeline { recording_id: recording_id.to_string(), states })
}

/// Rewrites every on-body run shorter than five minutes to OffBody.
pub fn enforce_min_wear(timeline: &WearStateTimeline) -> WearStateTimeline {
    let mut states = timeline.states.clone();
    for (start, len) in runs(&states, |s| *s != WearState::OffBody) {
        if len < MIN_WEAR_S {
            states[start..start + len].iter_mut().for_each(|s| *s = WearState::OffBody);
        }
    }
    WearStateTimeline { recording_id: timeline.recording_id.clone(), states }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoursSummary {
    pub offbody_h: f64,
    pub sleep_h: f64,
    pub wake_h: f64,
}

pub fn summarize_hours(timeline: &WearStateTimeline) -> HoursSummary {
    let count = |w| timeline.states.iter().filter(|&&s| s == w).count() as f64 / 3600.0;
    HoursSummary {
        offbody_h: count(WearState::OffBody),
        sleep_h: count(WearState::Sleep),
        wake_h: count(WearState::Wake),
    }
}

/// Full wear-state pass over an aligned recording.
pub fn label_recording(rec: &Recording) -> Result<WearStateTimeline> {
    let eda = rec.channel(ChannelKind::Eda)?;
    let temp = rec.channel(ChannelKind::Temp)?;
    let acc = [rec.channel(ChannelKind::AccX)?, rec.channel(ChannelKind::AccY)?, rec.channel(ChannelKind::AccZ)?];
    let mut offbody = detect_offbody(eda, temp);
    let total = acc.iter().map(|c| seconds(c)).min().unwrap_or(0);
    offbody.truncate(total);
    let sleep = detect_sleep(acc);
    let sleep = &sleep[..offbody.len().div_ceil(ANGLE_EPOCH_S)];
    Ok(enforce_min_wear(&compose_timeline(&rec.id, &offbody, sleep)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(kind: ChannelKind, rate: f64, values: Vec<f64>) -> ChannelSeries {
        ChannelSeries { kind, start_epoch: 0.0, rate_hz: rate, values }
    }

    fn off(eda: f64, temp: f64) -> bool {
        detect_offbody(&series(ChannelKind::Eda, 4.0, vec![eda; 4]), &series(ChannelKind::Temp, 1.0, vec![temp]))[0]
    }

    #[test]
    fn offbody_rules() {
        assert!(off(0.04, 35.0));
        assert!(off(1.2, 29.9));
        assert!(!off(0.05, 35.0));
        assert!(!off(100.0, 30.0));
        assert!(off(100.01, 35.0));
        assert!(!off(1.0, 40.0));
        assert!(off(1.0, 40.01));
    }

    #[test]
    fn single_bad_sample_marks_its_second() {
        let mut eda = vec![1.0; 12];
        eda[6] = 0.0;
        let flags = detect_offbody(&series(ChannelKind::Eda, 4.0, eda), &series(ChannelKind::Temp, 1.0, vec![35.0; 3]));
        assert_eq!(flags, vec![false, true, false]);
    }

    #[test]
    fn arm_angles() {
        assert_eq!(arm_angle(&[0.0], &[0.0], &[1.0]), 90.0);
        assert_eq!(arm_angle(&[0.0], &[0.0], &[-1.0]), -90.0);
        assert_eq!(arm_angle(&[1.0], &[0.0], &[0.0]), 0.0);
        assert!((arm_angle(&[1.0], &[0.0], &[1.0]) - 45.0).abs() < 1e-12);
        // medians, not means
        assert!((arm_angle(&[1.0, 1.0, 9.0], &[0.0; 3], &[1.0, 1.0, -7.0]) - 45.0).abs() < 1e-12);
    }

    #[test]
    fn sleep_runs() {
        assert!(sleep_from_angles(&[10.0; 72]).iter().all(|&s| s));
        let alt: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 10.0 } else { -10.0 }).collect();
        assert!(sleep_from_angles(&alt).iter().all(|&s| !s));

        // 48 still epochs between big swings: brute-force scan says no chain reaches 60
        let mut trace = vec![0.0; 10];
        trace.extend(std::iter::repeat_n(45.0, 48));
        trace.extend((0..10).map(|i| if i % 2 == 0 { -45.0 } else { 45.0 }));
        let longest = brute_force_longest_chain(&trace);
        assert!(longest < SLEEP_MIN_EPOCHS);
        assert!(sleep_from_angles(&trace).iter().all(|&s| !s));
    }

    fn brute_force_longest_chain(a: &[f64]) -> usize {
        let mut best = 0;
        for i in 0..a.len() {
            let mut j = i;
            while j + 1 < a.len() && (a[j + 1] - a[j]).abs() <= ANGLE_CHANGE_DEG {
                j += 1;
            }
            best = best.max(j - i + 1);
        }
        best
    }

    #[test]
    fn detect_sleep_on_motionless_acc() {
        let n = 360 * 32;
        let acc = [
            series(ChannelKind::AccX, 32.0, vec![0.3; n]),
            series(ChannelKind::AccY, 32.0, vec![0.1; n]),
            series(ChannelKind::AccZ, 32.0, vec![0.9; n]),
        ];
        let sleep = detect_sleep([&acc[0], &acc[1], &acc[2]]);
        assert_eq!(sleep.len(), 72);
        assert!(sleep.iter().all(|&s| s));
    }

    #[test]
    fn compose_precedence() {
        let t = compose_timeline("r", &[true, false, false, false, false, false], &[true, false]).unwrap();
        assert_eq!(t.states[0], WearState::OffBody);
        assert_eq!(t.states[1], WearState::Sleep);
        assert_eq!(t.states[5], WearState::Wake);
        assert!(matches!(compose_timeline("r", &[false; 6], &[true]), Err(Error::LengthMismatch { .. })));
    }

    fn tl(states: Vec<WearState>) -> WearStateTimeline {
        WearStateTimeline { recording_id: "r".into(), states }
    }

    #[test]
    fn min_wear() {
        use WearState::*;
        let mut s = vec![OffBody; 10];
        s.extend(vec![Wake; 200]);
        s.extend(vec![OffBody; 10]);
        assert!(enforce_min_wear(&tl(s)).states.iter().all(|&x| x == OffBody));

        let mut s = vec![OffBody; 10];
        s.extend(vec![Wake; 150]);
        s.extend(vec![Sleep; 150]);
        s.extend(vec![OffBody; 10]);
        assert_eq!(enforce_min_wear(&tl(s.clone())).states, s);

        let s = vec![Wake; 4000];
        assert_eq!(enforce_min_wear(&tl(s.clone())).states, s);

        let mut s = vec![OffBody; 5];
        s.extend(vec![Wake; 300]);
        assert_eq!(enforce_min_wear(&tl(s.clone())).states, s);
    }

    #[test]
    fn hours() {
        use WearState::*;
        let h = summarize_hours(&tl(vec![Wake; 3600]));
        assert_eq!((h.offbody_h, h.sleep_h, h.wake_h), (0.0, 0.0, 1.0));
        let mut s = vec![OffBody; 1800];
        s.extend(vec![Sleep; 1800]);
        let h = summarize_hours(&tl(s));
        assert_eq!((h.offbody_h, h.sleep_h, h.wake_h), (0.5, 0.5, 0.0));
    }

    #[test]
    fn timeline_text_round_trip() {
        use WearState::*;
        let t = tl(vec![OffBody, Sleep, Wake, Wake]);
        assert_eq!(WearStateTimeline::parse(&t.to_string()).unwrap(), t);
    }

    fn arb_states() -> impl Strategy<Value = Vec<WearState>> {
        // runs of random length so that both short and long on-body runs occur
        prop::collection::vec((0..3u8, 1..700usize), 1..12).prop_map(|runs| {
            runs.into_iter()
                .flat_map(|(s, n)| {
                    let w = [WearState::OffBody, WearState::Sleep, WearState::Wake][s as usize];
                    std::iter::repeat_n(w, n)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn min_wear_idempotent_and_monotone(states in arb_states()) {
            let once = enforce_min_wear(&tl(states.clone()));
            prop_assert_eq!(&enforce_min_wear(&once), &once);
            for (a, b) in states.iter().zip(&once.states) {
                if *a == WearState::OffBody { prop_assert_eq!(*b, WearState::OffBody); }
            }
            for (_, len) in runs(&once.states, |s| *s != WearState::OffBody) {
                prop_assert!(len >= MIN_WEAR_S);
            }
        }

        #[test]
        fn hours_match_tally(states in arb_states()) {
            let h = summarize_hours(&tl(states.clone()));
            let tally = |w| states.iter().filter(|&&s| s == w).count() as f64 / 3600.0;
            prop_assert_eq!(h.offbody_h, tally(WearState::OffBody));
            prop_assert_eq!(h.sleep_h, tally(WearState::Sleep));
            prop_assert_eq!(h.wake_h, tally(WearState::Wake));
            prop_assert!((h.offbody_h + h.sleep_h + h.wake_h - states.len() as f64 / 3600.0).abs() < 1e-12);
        }

        #[test]
        fn sleep_invariant_to_acc_scaling(angles in prop::collection::vec(-1.0f64..1.0, 5..40), scale in 0.1f64..20.0) {
            let n = angles.len() * 160;
            let mk = |f: &dyn Fn(f64) -> f64, kind| {
                series(kind, 32.0, (0..n).map(|i| f(angles[i / 160])).collect())
            };
            let base = [mk(&|a| a.cos(), ChannelKind::AccX), mk(&|_| 0.2, ChannelKind::AccY), mk(&|a| a.sin(), ChannelKind::AccZ)];
            let scaled = [mk(&|a| scale * a.cos(), ChannelKind::AccX), mk(&|_| scale * 0.2, ChannelKind::AccY), mk(&|a| scale * a.sin(), ChannelKind::AccZ)];
            let a = angle_series([&base[0], &base[1], &base[2]]);
            let b = angle_series([&scaled[0], &scaled[1], &scaled[2]]);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert_eq!(sleep_from_angles(&a), sleep_from_angles(&b));
        }
    }
}
