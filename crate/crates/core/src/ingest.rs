//! Parsing of Empatica E4 style export directories.
//!
//! Every channel file starts with two header rows (start epoch, sampling rate)
//! followed by one sample per row. `ACC.csv` carries three comma separated
//! columns of raw counts (1/64 g). `IBI.csv` carries a start epoch row and then
//! `offset_s,ibi_s` rows.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Raw ACC counts per g.
pub const ACC_COUNTS_PER_G: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ChannelKind {
    AccX,
    AccY,
    AccZ,
    Bvp,
    Eda,
    Temp,
    Hr,
}

impl ChannelKind {
    /// Channels fed to the model, in storage order.
    pub const MODEL: [ChannelKind; 6] = [
        ChannelKind::AccX,
        ChannelKind::AccY,
        ChannelKind::AccZ,
        ChannelKind::Bvp,
        ChannelKind::Eda,
        ChannelKind::Temp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ChannelKind::AccX => "ACC_X",
            ChannelKind::AccY => "ACC_Y",
            ChannelKind::AccZ => "ACC_Z",
            ChannelKind::Bvp => "BVP",
            ChannelKind::Eda => "EDA",
            ChannelKind::Temp => "TEMP",
            ChannelKind::Hr => "HR",
        }
    }

    pub fn is_acc(self) -> bool {
        matches!(self, ChannelKind::AccX | ChannelKind::AccY | ChannelKind::AccZ)
    }

    fn file_name(self) -> &'static str {
        match self {
            ChannelKind::AccX | ChannelKind::AccY | ChannelKind::AccZ => "ACC.csv",
            ChannelKind::Bvp => "BVP.csv",
            ChannelKind::Eda => "EDA.csv",
            ChannelKind::Temp => "TEMP.csv",
            ChannelKind::Hr => "HR.csv",
        }
    }

    fn acc_column(self) -> Option<usize> {
        match self {
            ChannelKind::AccX => Some(0),
            ChannelKind::AccY => Some(1),
            ChannelKind::AccZ => Some(2),
            _ => None,
        }
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Nominal sampling rates in Hz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelRates {
    pub acc: f64,
    pub bvp: f64,
    pub eda: f64,
    pub temp: f64,
    pub hr: f64,
}

impl Default for ChannelRates {
    fn default() -> Self {
        ChannelRates { acc: 32.0, bvp: 64.0, eda: 4.0, temp: 1.0, hr: 1.0 }
    }
}

impl ChannelRates {
    pub fn get(&self, kind: ChannelKind) -> f64 {
        match kind {
            ChannelKind::AccX | ChannelKind::AccY | ChannelKind::AccZ => self.acc,
            ChannelKind::Bvp => self.bvp,
            ChannelKind::Eda => self.eda,
            ChannelKind::Temp => self.temp,
            ChannelKind::Hr => self.hr,
        }
    }

    /// Rates of the six model channels as whole samples per second.
    pub fn model_rates(&self) -> Result<[usize; 6]> {
        let mut out = [0usize; 6];
        for (slot, kind) in out.iter_mut().zip(ChannelKind::MODEL) {
            let r = self.get(kind);
            if r <= 0.0 || r.fract() != 0.0 {
                return Err(Error::Config(format!("{kind} rate {r} is not a positive whole number")));
            }
            *slot = r as usize;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSeries {
    pub kind: ChannelKind,
    pub start_epoch: f64,
    pub rate_hz: f64,
    pub values: Vec<f64>,
}

impl ChannelSeries {
    pub fn end_epoch(&self) -> f64 {
        self.start_epoch + self.values.len() as f64 / self.rate_hz
    }

    /// Sample index range covering `[from_s, to_s)` seconds after `start_epoch`.
    pub fn index_range(&self, from_s: f64, to_s: f64) -> std::ops::Range<usize> {
        let lo = (from_s * self.rate_hz).floor().max(0.0) as usize;
        let hi = ((to_s * self.rate_hz).floor().max(0.0) as usize).min(self.values.len());
        lo.min(hi)..hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IbiEvent {
    pub offset_s: f64,
    pub ibi_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IbiSeries {
    pub start_epoch: f64,
    pub events: Vec<IbiEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Euthymia,
    AcuteEpisode,
    Unlabelled,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Euthymia => "euthymia",
            Label::AcuteEpisode => "acute",
            Label::Unlabelled => "unlabelled",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "euthymia" | "0" => Some(Label::Euthymia),
            "acute" | "acuteepisode" | "acute_episode" | "1" => Some(Label::AcuteEpisode),
            "unlabelled" | "unlabeled" | "none" | "-" => Some(Label::Unlabelled),
            _ => None,
        }
    }

    /// Binary target (1 = acute episode) for labelled recordings.
    pub fn target(self) -> Option<u8> {
        match self {
            Label::Euthymia => Some(0),
            Label::AcuteEpisode => Some(1),
            Label::Unlabelled => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordingMeta {
    pub id: String,
    pub subject_id: String,
    pub dataset_tag: String,
    pub label: Label,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub subject_id: String,
    pub dataset_tag: String,
    pub label: Label,
    pub channels: BTreeMap<ChannelKind, ChannelSeries>,
    pub ibi: Option<IbiSeries>,
}

impl Recording {
    pub fn channel(&self, kind: ChannelKind) -> Result<&ChannelSeries> {
        self.channels.get(&kind).ok_or(Error::MissingChannel(kind))
    }

    /// Duration in seconds of the shortest channel.
    pub fn duration_s(&self) -> f64 {
        self.channels
            .values()
            .map(|c| c.values.len() as f64 / c.rate_hz)
            .fold(f64::INFINITY, f64::min)
    }

    /// Start epoch shared by all channels (after [`align`]).
    pub fn start_epoch(&self) -> f64 {
        self.channels.values().map(|c| c.start_epoch).fold(f64::NEG_INFINITY, f64::max)
    }

    fn check_required(&self) -> Result<()> {
        for kind in ChannelKind::MODEL {
            self.channel(kind)?;
        }
        Ok(())
    }
}

fn parse_number(token: &str, line_no: usize) -> Result<f64> {
    let v: f64 = token.trim().parse().map_err(|_| Error::MalformedRow(line_no))?;
    if !v.is_finite() {
        return Err(Error::MalformedRow(line_no));
    }
    Ok(v)
}

fn decode(bytes: &[u8]) -> Result<&str> {
    std::str::from_utf8(bytes).map_err(|_| Error::MalformedRow(1))
}

/// Splits into numbered non-empty lines. Trailing blank lines are dropped.
fn lines(text: &str) -> Vec<(usize, &str)> {
    text.trim_end().lines().enumerate().map(|(i, l)| (i + 1, l.trim())).collect()
}

fn parse_header(rows: &[(usize, &str)]) -> Result<(f64, f64)> {
    if rows.len() < 2 || rows[0].1.is_empty() {
        return Err(Error::EmptyFile);
    }
    let first = |(no, row): (usize, &str)| -> Result<f64> {
        parse_number(row.split(',').next().unwrap_or(""), no)
    };
    let start = first(rows[0])?;
    let rate = first(rows[1])?;
    if rate <= 0.0 {
        return Err(Error::NonPositiveRate(rate));
    }
    Ok((start, rate))
}

/// Parses one channel file. For ACC kinds the matching column of `ACC.csv` is
/// returned, converted from raw counts to g.
pub fn parse_channel_file(bytes: &[u8], kind: ChannelKind) -> Result<ChannelSeries> {
    if let Some(col) = kind.acc_column() {
        let [x, y, z] = parse_acc_file(bytes)?;
        return Ok([x, y, z].into_iter().nth(col).expect("three axes"));
    }
    let rows = lines(decode(bytes)?);
    let (start_epoch, rate_hz) = parse_header(&rows)?;
    let values = rows[2..]
        .iter()
        .map(|&(no, row)| {
            if row.contains(',') {
                return Err(Error::MalformedRow(no));
            }
            parse_number(row, no)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChannelSeries { kind, start_epoch, rate_hz, values })
}

/// Parses the three-column `ACC.csv` into X, Y, Z series in g.
pub fn parse_acc_file(bytes: &[u8]) -> Result<[ChannelSeries; 3]> {
    let rows = lines(decode(bytes)?);
    let (start_epoch, rate_hz) = parse_header(&rows)?;
    let mut axes: [Vec<f64>; 3] = Default::default();
    for &(no, row) in &rows[2..] {
        let mut cols = row.split(',');
        for axis in axes.iter_mut() {
            let tok = cols.next().ok_or(Error::MalformedRow(no))?;
            axis.push(parse_number(tok, no)? / ACC_COUNTS_PER_G);
        }
        if cols.next().is_some() {
            return Err(Error::MalformedRow(no));
        }
    }
    let [x, y, z] = axes;
    let mk = |kind, values| ChannelSeries { kind, start_epoch, rate_hz, values };
    Ok([mk(ChannelKind::AccX, x), mk(ChannelKind::AccY, y), mk(ChannelKind::AccZ, z)])
}

pub fn parse_ibi_file(bytes: &[u8]) -> Result<IbiSeries> {
    let rows = lines(decode(bytes)?);
    let Some(&(no, head)) = rows.first() else {
        return Err(Error::EmptyFile);
    };
    if head.is_empty() {
        return Err(Error::EmptyFile);
    }
    let start_epoch = parse_number(head.split(',').next().unwrap_or(""), no)?;
    let mut events: Vec<IbiEvent> = Vec::with_capacity(rows.len().saturating_sub(1));
    for &(no, row) in &rows[1..] {
        let mut cols = row.split(',');
        let (Some(a), Some(b), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(Error::MalformedRow(no));
        };
        let ev = IbiEvent { offset_s: parse_number(a, no)?, ibi_s: parse_number(b, no)? };
        let increasing = events.last().is_none_or(|p| ev.offset_s > p.offset_s);
        if ev.ibi_s <= 0.0 || !increasing {
            return Err(Error::MalformedRow(no));
        }
        events.push(ev);
    }
    Ok(IbiSeries { start_epoch, events })
}

/// Serializes a single-column channel in export format.
pub fn write_channel_file(series: &ChannelSeries) -> String {
    let mut out = format!("{}\n{}\n", series.start_epoch, series.rate_hz);
    for v in &series.values {
        out.push_str(&format!("{v}\n"));
    }
    out
}

/// Serializes three ACC axes (in g) back to raw counts.
pub fn write_acc_file(axes: [&ChannelSeries; 3]) -> String {
    let [x, y, z] = axes;
    let (s, r) = (x.start_epoch, x.rate_hz);
    let mut out = format!("{s}, {s}, {s}\n{r}, {r}, {r}\n");
    for i in 0..x.values.len() {
        out.push_str(&format!(
            "{}, {}, {}\n",
            x.values[i] * ACC_COUNTS_PER_G,
            y.values[i] * ACC_COUNTS_PER_G,
            z.values[i] * ACC_COUNTS_PER_G
        ));
    }
    out
}

pub fn write_ibi_file(ibi: &IbiSeries) -> String {
    let mut out = format!("{}, IBI\n", ibi.start_epoch);
    for ev in &ibi.events {
        out.push_str(&format!("{},{}\n", ev.offset_s, ev.ibi_s));
    }
    out
}

fn read(path: &Path) -> Result<Option<Vec<u8>>> {
    match fs::read(path) {
        Ok(b) => Ok(Some(b)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Loads one export directory. HR and IBI are optional.
pub fn load_recording(dir: &Path, meta: &RecordingMeta) -> Result<Recording> {
    let mut channels = BTreeMap::new();
    let acc = read(&dir.join("ACC.csv"))?.ok_or(Error::MissingChannel(ChannelKind::AccX))?;
    for series in parse_acc_file(&acc)? {
        channels.insert(series.kind, series);
    }
    for kind in [ChannelKind::Bvp, ChannelKind::Eda, ChannelKind::Temp, ChannelKind::Hr] {
        match read(&dir.join(kind.file_name()))? {
            Some(bytes) => {
                let series = parse_channel_file(&bytes, kind)
                    .map_err(|e| e.context(format!("{}", dir.join(kind.file_name()).display())))?;
                channels.insert(kind, series);
            }
            None if kind == ChannelKind::Hr => {}
            None => return Err(Error::MissingChannel(kind)),
        }
    }
    let ibi = read(&dir.join("IBI.csv"))?.map(|b| parse_ibi_file(&b)).transpose()?;
    let rec = Recording {
        id: meta.id.clone(),
        subject_id: meta.subject_id.clone(),
        dataset_tag: meta.dataset_tag.clone(),
        label: meta.label,
        channels,
        ibi,
    };
    rec.check_required()?;
    Ok(rec)
}

const SNAP_EPS: f64 = 1e-9;

/// Trims every channel to the common whole-second interval.
///
/// The interval starts at the latest channel start rounded up to a whole
/// second and lasts a whole number of seconds. No resampling takes place.
pub fn align(recording: &Recording) -> Result<Recording> {
    if recording.channels.values().any(|c| c.values.is_empty()) {
        return Err(Error::EmptyIntersection);
    }
    let latest_start = recording.start_epoch();
    let t0 = (latest_start - SNAP_EPS).ceil();
    let end = recording.channels.values().map(|c| c.end_epoch()).fold(f64::INFINITY, f64::min);
    let duration = (end - t0 + SNAP_EPS).floor();
    if !(duration >= 1.0) {
        return Err(Error::EmptyIntersection);
    }
    let mut channels = BTreeMap::new();
    for (&kind, c) in &recording.channels {
        let first = ((t0 - c.start_epoch) * c.rate_hz - SNAP_EPS).ceil().max(0.0) as usize;
        let count = (duration * c.rate_hz + SNAP_EPS).floor() as usize;
        let last = (first + count).min(c.values.len());
        channels.insert(
            kind,
            ChannelSeries {
                kind,
                start_epoch: t0,
                rate_hz: c.rate_hz,
                values: c.values[first..last].to_vec(),
            },
        );
    }
    let ibi = recording.ibi.as_ref().map(|ibi| IbiSeries {
        start_epoch: t0,
        events: ibi
            .events
            .iter()
            .filter_map(|ev| {
                let offset_s = ibi.start_epoch + ev.offset_s - t0;
                (offset_s >= 0.0 && offset_s < duration).then_some(IbiEvent { offset_s, ibi_s: ev.ibi_s })
            })
            .collect(),
    });
    Ok(Recording {
        id: recording.id.clone(),
        subject_id: recording.subject_id.clone(),
        dataset_tag: recording.dataset_tag.clone(),
        label: recording.label,
        channels,
        ibi,
    })
}

/// Reads a tab separated recording manifest:
/// `recording_id  subject_id  dataset_tag  label  path`.
///
/// Relative paths resolve against the manifest's directory. Blank lines,
/// `#` comments and a `recording_id` header row are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<RecordingMeta>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with("recording_id") {
            continue;
        }
        let cols: Vec<&str> = trimmed.split('\t').map(str::trim).collect();
        if cols.len() != 5 {
            return Err(Error::Manifest { line: line_no, reason: format!("expected 5 columns, got {}", cols.len()) });
        }
        let label = Label::parse(cols[3])
            .ok_or_else(|| Error::Manifest { line: line_no, reason: format!("unknown label `{}`", cols[3]) })?;
        let p = PathBuf::from(cols[4]);
        out.push(RecordingMeta {
            id: cols[0].to_string(),
            subject_id: cols[1].to_string(),
            dataset_tag: cols[2].to_string(),
            label,
            path: if p.is_absolute() { p } else { base.join(p) },
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, metas: &[RecordingMeta]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = String::from("recording_id\tsubject_id\tdataset_tag\tlabel\tpath\n");
    for m in metas {
        let rel = m.path.strip_prefix(base).unwrap_or(&m.path);
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            m.id,
            m.subject_id,
            m.dataset_tag,
            m.label,
            rel.display()
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes a recording in export layout under `dir`.
pub fn write_recording(dir: &Path, rec: &Recording) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let put = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    put(
        "ACC.csv",
        write_acc_file([
            rec.channel(ChannelKind::AccX)?,
            rec.channel(ChannelKind::AccY)?,
            rec.channel(ChannelKind::AccZ)?,
        ]),
    )?;
    for kind in [ChannelKind::Bvp, ChannelKind::Eda, ChannelKind::Temp, ChannelKind::Hr] {
        if let Some(c) = rec.channels.get(&kind) {
            put(kind.file_name(), write_channel_file(c))?;
        }
    }
    if let Some(ibi) = &rec.ibi {
        put("IBI.csv", write_ibi_file(ibi))?;
    }
    Ok(())
}
