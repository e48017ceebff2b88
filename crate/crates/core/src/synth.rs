//! Synthetic recordings in export layout, for tests and demos.
//!
//! Two classes differ in pulse frequency and EDA baseline. Pulse amplitude,
//! EDA level and temperature wander slowly so that static levels carry little
//! stable class information. Off-body and sleep windows are injected at fixed
//! offsets.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::{
    write_manifest, write_recording, ChannelKind, ChannelRates, ChannelSeries, IbiEvent, IbiSeries, Label,
    Recording, RecordingMeta,
};
use crate::training::{id_hash, stream_rng};

pub const MANIFEST: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub subjects_per_class: usize,
    pub duration_s: usize,
    /// `(dataset_tag, recording count)` of unlabelled recordings.
    pub unlabelled: Vec<(String, usize)>,
    pub rates: ChannelRates,
    /// `(start_s, len_s)` windows with the device off the wrist.
    pub offbody: Vec<(usize, usize)>,
    /// `(start_s, len_s)` windows without arm movement.
    pub sleep: Vec<(usize, usize)>,
    /// Pulse frequency in Hz for euthymia and acute episode.
    pub class_bvp_hz: [f64; 2],
    /// EDA baseline in microsiemens for euthymia and acute episode.
    pub class_eda_us: [f64; 2],
    pub start_epoch: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            subjects_per_class: 8,
            duration_s: 3600,
            unlabelled: vec![("unl_a".into(), 4), ("unl_b".into(), 4)],
            rates: ChannelRates::default(),
            offbody: vec![(600, 600)],
            sleep: vec![(2400, 420)],
            class_bvp_hz: [1.0, 1.45],
            class_eda_us: [2.0, 3.0],
            start_epoch: 1_600_000_000.0,
            seed: 0,
        }
    }
}

fn windows(s: &str) -> Result<Vec<(usize, usize)>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|w| {
            let (a, b) = w.split_once(':').ok_or_else(|| Error::Config(format!("window `{w}` is not start:len")))?;
            let p = |x: &str| x.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad window `{w}`")));
            Ok((p(a)?, p(b)?))
        })
        .collect()
}

fn pair(s: &str) -> Result<[f64; 2]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad pair `{s}`"))))
        .collect::<Result<_>>()?;
    match v.as_slice() {
        [a, b] => Ok([*a, *b]),
        _ => Err(Error::Config(format!("expected two values, got `{s}`"))),
    }
}

impl SynthSpec {
    /// Reads `key=value` lines over the defaults. Window lists are written
    /// `start:len,start:len`, unlabelled datasets `tag:count,tag:count`.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = crate::training::config::parse_key_values(text)?;
        let mut s = SynthSpec::default();
        let num = |k: &str, v: &str| v.parse::<usize>().map_err(|_| Error::Config(format!("bad value `{v}` for {k}")));
        for (k, v) in &kv {
            match k.as_str() {
                "subjects_per_class" => s.subjects_per_class = num(k, v)?,
                "duration_s" => s.duration_s = num(k, v)?,
                "seed" => s.seed = v.parse().map_err(|_| Error::Config(format!("bad seed `{v}`")))?,
                "start_epoch" => s.start_epoch = v.parse().map_err(|_| Error::Config(format!("bad epoch `{v}`")))?,
                "offbody" => s.offbody = windows(v)?,
                "sleep" => s.sleep = windows(v)?,
                "class_bvp_hz" => s.class_bvp_hz = pair(v)?,
                "class_eda_us" => s.class_eda_us = pair(v)?,
                "unlabelled" => {
                    s.unlabelled = windows_named(v)?;
                }
                "rate_acc" => s.rates.acc = v.parse().map_err(|_| Error::Config(format!("bad rate `{v}`")))?,
                "rate_bvp" => s.rates.bvp = v.parse().map_err(|_| Error::Config(format!("bad rate `{v}`")))?,
                "rate_eda" => s.rates.eda = v.parse().map_err(|_| Error::Config(format!("bad rate `{v}`")))?,
                "rate_temp" => s.rates.temp = v.parse().map_err(|_| Error::Config(format!("bad rate `{v}`")))?,
                other => return Err(Error::Config(format!("unknown synth key `{other}`"))),
            }
        }
        s.rates.model_rates()?;
        Ok(s)
    }
}

fn windows_named(s: &str) -> Result<Vec<(String, usize)>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|w| {
            let (a, b) = w.split_once(':').ok_or_else(|| Error::Config(format!("`{w}` is not tag:count")))?;
            Ok((a.trim().to_string(), b.trim().parse().map_err(|_| Error::Config(format!("bad count in `{w}`")))?))
        })
        .collect()
}

/// Sum of three slow sinusoids with periods between 5 and 30 minutes, unit
/// amplitude scale.
struct Wander {
    parts: [(f64, f64, f64); 3],
}

impl Wander {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut part = || (rng.random_range(0.3..0.6), rng.random_range(300.0..1800.0), rng.random_range(0.0..TAU));
        Wander { parts: [part(), part(), part()] }
    }

    fn at(&self, t: f64) -> f64 {
        self.parts.iter().map(|(a, p, ph)| a * (TAU * t / p + ph).sin()).sum()
    }
}

fn inside(t: f64, ws: &[(usize, usize)]) -> bool {
    ws.iter().any(|&(s, l)| t >= s as f64 && t < (s + l) as f64)
}

fn round_to(x: f64, step: f64) -> f64 {
    (x / step).round() * step
}

struct Profile {
    bvp_hz: f64,
    eda_us: f64,
}

fn make_recording(meta: &RecordingMeta, profile: Profile, spec: &SynthSpec) -> Recording {
    let mut rng = stream_rng(spec.seed, "synth", &[id_hash(&meta.id)]);
    let t_total = spec.duration_s as f64;
    let r = &spec.rates;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    // pulse: frequency and amplitude wander, IBI from phase wraps
    let freq_w = Wander::new(&mut rng);
    let amp_w = Wander::new(&mut rng);
    let n_bvp = (t_total * r.bvp) as usize;
    let mut bvp = Vec::with_capacity(n_bvp);
    let mut hr_acc = vec![0.0; spec.duration_s];
    let mut events = Vec::new();
    let mut phase = rng.random_range(0.0..TAU);
    let mut last_beat: Option<f64> = None;
    for i in 0..n_bvp {
        let t = i as f64 / r.bvp;
        let f = profile.bvp_hz * (1.0 + 0.04 * freq_w.at(t));
        let before = phase;
        phase += TAU * f / r.bvp;
        if (phase / TAU).floor() > (before / TAU).floor() {
            if let Some(prev) = last_beat {
                events.push(IbiEvent { offset_s: round_to(t, 1e-6), ibi_s: round_to(t - prev, 1e-6) });
            }
            last_beat = Some(t);
        }
        hr_acc[(t as usize).min(spec.duration_s - 1)] += 60.0 * f / r.bvp;
        let amp = 40.0 * (0.7 * amp_w.at(t)).exp();
        let wave = phase.sin() + 0.4 * (2.0 * phase + 0.5).sin();
        let v = if inside(t, &spec.offbody) { 2.0 * unit.sample(&mut rng) } else { amp * wave + 2.0 * unit.sample(&mut rng) };
        bvp.push(round_to(v, 0.01));
    }
    let hr: Vec<f64> = hr_acc.iter().map(|h| round_to(*h, 0.01)).collect();

    // EDA: per-recording level, slow multiplicative wander, linear trend and
    // sparse skin-conductance responses
    let level = (profile.eda_us + 0.8 * unit.sample(&mut rng)).max(0.6);
    let trend = 0.8 * unit.sample(&mut rng);
    let eda_w = Wander::new(&mut rng);
    let n_eda = (t_total * r.eda) as usize;
    let mut scr = 0.0;
    let mut eda = Vec::with_capacity(n_eda);
    for i in 0..n_eda {
        let t = i as f64 / r.eda;
        scr *= (-1.0 / (4.0 * r.eda)).exp();
        if rng.random::<f64>() < 1.0 / (45.0 * r.eda) {
            scr += rng.random_range(0.05..0.4);
        }
        let base = level * (1.0 + 0.35 * eda_w.at(t)) + trend * t / t_total;
        let v = if inside(t, &spec.offbody) { 0.01 } else { (base + scr + 0.005 * unit.sample(&mut rng)).max(0.1) };
        eda.push(round_to(v, 1e-6));
    }

    let temp_w = Wander::new(&mut rng);
    let temp_level = rng.random_range(32.0..34.5);
    let n_temp = (t_total * r.temp) as usize;
    let temp: Vec<f64> = (0..n_temp)
        .map(|i| {
            let t = i as f64 / r.temp;
            let v = if inside(t, &spec.offbody) { 26.0 } else { temp_level + 0.6 * temp_w.at(t) + 0.02 * unit.sample(&mut rng) };
            round_to(v, 0.01)
        })
        .collect();

    // ACC: a fresh random arm orientation every 5 s while awake, a fixed one
    // while asleep or off the wrist
    let n_acc = (t_total * r.acc) as usize;
    let mut acc = [Vec::with_capacity(n_acc), Vec::with_capacity(n_acc), Vec::with_capacity(n_acc)];
    let mut orient = [0.0, 0.0, 1.0];
    let rest = [0.3, 0.1, 0.95];
    let mut epoch_seen = usize::MAX;
    for i in 0..n_acc {
        let t = i as f64 / r.acc;
        let still = inside(t, &spec.sleep) || inside(t, &spec.offbody);
        let epoch = (t / 5.0) as usize;
        if epoch != epoch_seen {
            epoch_seen = epoch;
            let pitch: f64 = rng.random_range(-1.2..1.2);
            let yaw: f64 = rng.random_range(0.0..TAU);
            orient = [pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), pitch.sin()];
        }
        let (o, jitter) = if still { (rest, 0.004) } else { (orient, 0.08) };
        for a in 0..3 {
            acc[a].push(round_to(o[a] + jitter * unit.sample(&mut rng), 1.0 / 64.0));
        }
    }

    let start = spec.start_epoch;
    let series = |kind, rate, values| ChannelSeries { kind, start_epoch: start, rate_hz: rate, values };
    let [ax, ay, az] = acc;
    let mut channels = BTreeMap::new();
    channels.insert(ChannelKind::AccX, series(ChannelKind::AccX, r.acc, ax));
    channels.insert(ChannelKind::AccY, series(ChannelKind::AccY, r.acc, ay));
    channels.insert(ChannelKind::AccZ, series(ChannelKind::AccZ, r.acc, az));
    channels.insert(ChannelKind::Bvp, series(ChannelKind::Bvp, r.bvp, bvp));
    channels.insert(ChannelKind::Eda, series(ChannelKind::Eda, r.eda, eda));
    channels.insert(ChannelKind::Temp, series(ChannelKind::Temp, r.temp, temp));
    channels.insert(ChannelKind::Hr, series(ChannelKind::Hr, r.hr, hr));
    Recording {
        id: meta.id.clone(),
        subject_id: meta.subject_id.clone(),
        dataset_tag: meta.dataset_tag.clone(),
        label: meta.label,
        channels,
        ibi: Some(IbiSeries { start_epoch: start, events }),
    }
}

/// Recording metadata and generated signals, without touching disk.
pub fn synthesize(spec: &SynthSpec, root: &Path) -> Vec<(RecordingMeta, Recording)> {
    let mut plan: Vec<(RecordingMeta, Profile)> = Vec::new();
    for (class, label) in [(0usize, Label::Euthymia), (1, Label::AcuteEpisode)] {
        for s in 1..=spec.subjects_per_class {
            let prefix = if class == 0 { "E" } else { "A" };
            let subject = format!("{prefix}{s:02}");
            let id = format!("{}_{subject}", label.as_str());
            let meta = RecordingMeta {
                id: id.clone(),
                subject_id: subject,
                dataset_tag: "target".into(),
                label,
                path: root.join(&id),
            };
            plan.push((meta, Profile { bvp_hz: spec.class_bvp_hz[class], eda_us: spec.class_eda_us[class] }));
        }
    }
    for (tag, count) in &spec.unlabelled {
        for i in 1..=*count {
            let id = format!("{tag}_{i:02}");
            let mut rng = stream_rng(spec.seed, "profile", &[id_hash(&id)]);
            let lo = spec.class_bvp_hz[0].min(spec.class_bvp_hz[1]);
            let hi = spec.class_bvp_hz[0].max(spec.class_bvp_hz[1]);
            let elo = spec.class_eda_us[0].min(spec.class_eda_us[1]);
            let ehi = spec.class_eda_us[0].max(spec.class_eda_us[1]);
            let profile = Profile {
                bvp_hz: rng.random_range(lo * 0.95..hi * 1.05),
                eda_us: rng.random_range(elo * 0.8..ehi * 1.2),
            };
            let meta = RecordingMeta {
                id: id.clone(),
                subject_id: format!("u_{id}"),
                dataset_tag: tag.clone(),
                label: Label::Unlabelled,
                path: root.join(&id),
            };
            plan.push((meta, profile));
        }
    }
    plan.into_par_iter()
        .map(|(meta, profile)| {
            let rec = make_recording(&meta, profile, spec);
            (meta, rec)
        })
        .collect()
}

/// Writes every synthetic recording under `root` plus `root/manifest.tsv`.
/// Returns the manifest path.
pub fn generate(spec: &SynthSpec, root: &Path) -> Result<PathBuf> {
    if spec.duration_s == 0 {
        return Err(Error::Config("duration_s must be positive".into()));
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let recs = synthesize(spec, root);
    recs.par_iter().try_for_each(|(meta, rec)| write_recording(&meta.path, rec))?;
    let metas: Vec<RecordingMeta> = recs.into_iter().map(|(m, _)| m).collect();
    let manifest = root.join(MANIFEST);
    write_manifest(&manifest, &metas)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{align, load_recording, read_manifest};
    use crate::wear_state::{label_recording, WearState};

    fn small() -> SynthSpec {
        SynthSpec {
            subjects_per_class: 1,
            duration_s: 1500,
            unlabelled: vec![],
            offbody: vec![(300, 600)],
            sleep: vec![],
            ..SynthSpec::default()
        }
    }

    #[test]
    fn archives_parse_and_offbody_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate(&small(), dir.path()).unwrap();
        let metas = read_manifest(&manifest).unwrap();
        assert_eq!(metas.len(), 2);
        for m in &metas {
            let rec = align(&load_recording(&m.path, m).unwrap()).unwrap();
            assert_eq!(rec.duration_s(), 1500.0);
            let tl = label_recording(&rec).unwrap();
            let off = tl.states.iter().filter(|&&s| s == WearState::OffBody).count();
            assert!(off >= 600, "{off}");
            assert!(tl.states[300..900].iter().all(|&s| s == WearState::OffBody));
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SynthSpec { duration_s: 400, offbody: vec![], ..small() };
        generate(&spec, a.path()).unwrap();
        generate(&spec, b.path()).unwrap();
        for f in ["ACC.csv", "BVP.csv", "EDA.csv", "TEMP.csv", "HR.csv", "IBI.csv"] {
            let x = std::fs::read(a.path().join("euthymia_E01").join(f)).unwrap();
            let y = std::fs::read(b.path().join("euthymia_E01").join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
    }

    #[test]
    fn motionless_window_is_sleep() {
        let spec = SynthSpec { duration_s: 1800, offbody: vec![], sleep: vec![(600, 420)], ..small() };
        let dir = tempfile::tempdir().unwrap();
        let (_, rec) = synthesize(&spec, dir.path()).remove(0);
        let tl = label_recording(&align(&rec).unwrap()).unwrap();
        assert!(tl.states[610..1010].iter().all(|&s| s == WearState::Sleep));
        assert!(tl.states[..590].iter().all(|&s| s == WearState::Wake));
    }

    #[test]
    fn spec_parses() {
        let s = SynthSpec::parse("subjects_per_class=2\nunlabelled=x:3\noffbody=10:20,40:5\nsleep=\n").unwrap();
        assert_eq!(s.subjects_per_class, 2);
        assert_eq!(s.unlabelled, vec![("x".to_string(), 3)]);
        assert_eq!(s.offbody, vec![(10, 20), (40, 5)]);
        assert!(s.sleep.is_empty());
        assert!(SynthSpec::parse("bogus=1").is_err());
    }
}
