//! On-disk segment store.
//!
//! ```text
//! <root>/manifest.tsv      one row per segment
//! <root>/segments/<id>.bin little-endian f32 channels, ACC_X ACC_Y ACC_Z BVP EDA TEMP
//! <root>/ibi.tsv           segment_id, offset_s, ibi_s
//! <root>/store.tsv         key=value store settings
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ingest::{ChannelKind, IbiEvent, Label};
use crate::segmentation::{Segment, SegmentationConfig, Split, Standardizer};

pub const MANIFEST: &str = "manifest.tsv";
pub const TARGET_STANDARDIZER: &str = "standardizer_target.tsv";
pub const SSL_STANDARDIZER: &str = "standardizer_ssl.tsv";

const BASE_COLUMNS: [&str; 10] = [
    "segment_id",
    "recording_id",
    "subject_id",
    "dataset_tag",
    "label",
    "split",
    "ssl_split",
    "start_s",
    "omega_s",
    "blob",
];

#[derive(Debug, Clone, PartialEq)]
pub struct StoreMeta {
    pub segmentation: SegmentationConfig,
    pub seed: u64,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn manifest_header() -> String {
    let mut cols: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    for kind in ChannelKind::MODEL {
        cols.push(format!("{kind}_offset"));
        cols.push(format!("{kind}_bytes"));
    }
    cols.join("\t")
}

pub fn encode_blob(seg: &Segment) -> Vec<u8> {
    let total: usize = seg.channels.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(total * 4);
    for ch in &seg.channels {
        for v in ch {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes segments, replacing any previous manifest.
pub fn write_store(root: &Path, meta: &StoreMeta, segments: &[Segment]) -> Result<()> {
    let seg_dir = root.join("segments");
    fs::create_dir_all(&seg_dir).map_err(|e| Error::io(&seg_dir, e))?;
    let mut manifest = manifest_header();
    manifest.push('\n');
    let mut ibi = String::from("segment_id\toffset_s\tibi_s\n");
    for seg in segments {
        let blob = format!("segments/{}.bin", seg.id);
        write(&root.join(&blob), encode_blob(seg))?;
        let mut row = vec![
            seg.id.clone(),
            seg.recording_id.clone(),
            seg.subject_id.clone(),
            seg.dataset_tag.clone(),
            seg.label.to_string(),
            seg.split.to_string(),
            seg.ssl_split.to_string(),
            seg.start_s.to_string(),
            seg.omega_s.to_string(),
            blob,
        ];
        let mut offset = 0usize;
        for ch in &seg.channels {
            row.push(offset.to_string());
            row.push((ch.len() * 4).to_string());
            offset += ch.len() * 4;
        }
        manifest.push_str(&row.join("\t"));
        manifest.push('\n');
        for ev in &seg.ibi {
            ibi.push_str(&format!("{}\t{}\t{}\n", seg.id, ev.offset_s, ev.ibi_s));
        }
    }
    write(&root.join(MANIFEST), manifest)?;
    write(&root.join("ibi.tsv"), ibi)?;
    write(
        &root.join("store.tsv"),
        format!(
            "omega_s={}\ndelta_s={}\nseed={}\n",
            meta.segmentation.omega_s, meta.segmentation.delta_s, meta.seed
        ),
    )
}

pub fn read_meta(root: &Path) -> Result<StoreMeta> {
    let text = read_text(&root.join("store.tsv"))?;
    let kv = crate::training::config::parse_key_values(&text)?;
    let get = |k: &str| -> Result<u64> {
        kv.get(k)
            .ok_or_else(|| Error::Store(format!("store.tsv lacks `{k}`")))?
            .parse()
            .map_err(|_| Error::Store(format!("store.tsv `{k}` is not an integer")))
    };
    Ok(StoreMeta {
        segmentation: SegmentationConfig { omega_s: get("omega_s")? as usize, delta_s: get("delta_s")? as usize },
        seed: get("seed")?,
    })
}

pub fn read_store(root: &Path) -> Result<(StoreMeta, Vec<Segment>)> {
    let meta = read_meta(root)?;
    let text = read_text(&root.join(MANIFEST))?;
    let mut lines = text.lines();
    if lines.next() != Some(manifest_header().as_str()) {
        return Err(Error::Store("unexpected manifest header".into()));
    }
    let mut ibi: HashMap<String, Vec<IbiEvent>> = HashMap::new();
    if let Ok(ibi_text) = read_text(&root.join("ibi.tsv")) {
        for (i, line) in ibi_text.lines().enumerate().skip(1) {
            let c: Vec<&str> = line.split('\t').collect();
            let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::MalformedRow(i + 1));
            if c.len() != 3 {
                return Err(Error::MalformedRow(i + 1));
            }
            ibi.entry(c[0].to_string())
                .or_default()
                .push(IbiEvent { offset_s: parse(c[1])?, ibi_s: parse(c[2])? });
        }
    }
    let mut segments = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let c: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| Error::Store(format!("manifest line {line_no}: {what}"));
        if c.len() != BASE_COLUMNS.len() + 12 {
            return Err(bad("wrong column count"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("expected integer"));
        let omega_s = num(c[8])?;
        let blob_path: PathBuf = root.join(c[9]);
        let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let mut channels: [Vec<f32>; 6] = Default::default();
        let mut rates = [0usize; 6];
        for ch in 0..6 {
            let off = num(c[10 + 2 * ch])?;
            let len = num(c[11 + 2 * ch])?;
            let raw = bytes.get(off..off + len).ok_or_else(|| bad("channel outside blob"))?;
            channels[ch] = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            if omega_s == 0 || channels[ch].len() % omega_s != 0 {
                return Err(bad("channel length is not a multiple of omega"));
            }
            rates[ch] = channels[ch].len() / omega_s;
        }
        segments.push(Segment {
            id: c[0].to_string(),
            recording_id: c[1].to_string(),
            subject_id: c[2].to_string(),
            dataset_tag: c[3].to_string(),
            label: Label::parse(c[4]).ok_or_else(|| bad("label"))?,
            split: Split::parse(c[5]).ok_or_else(|| bad("split"))?,
            ssl_split: Split::parse(c[6]).ok_or_else(|| bad("ssl_split"))?,
            start_s: num(c[7])?,
            omega_s,
            rates,
            channels,
            ibi: ibi.remove(c[0]).unwrap_or_default(),
        });
    }
    Ok((meta, segments))
}

pub fn write_standardizer(root: &Path, name: &str, st: &Standardizer) -> Result<()> {
    write(&root.join(name), st.to_tsv())
}

pub fn read_standardizer(root: &Path, name: &str) -> Result<Standardizer> {
    Standardizer::from_tsv(&read_text(&root.join(name))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seg = Segment {
            id: "rec_0000004".into(),
            recording_id: "rec".into(),
            subject_id: "s1".into(),
            dataset_tag: "target".into(),
            start_s: 4,
            omega_s: 2,
            rates: [2, 2, 2, 4, 1, 1],
            channels: [
                vec![0.5, 1.5, 2.5, 3.5],
                vec![-1.0; 4],
                vec![1e-7; 4],
                (0..8).map(|i| i as f32).collect(),
                vec![0.25, 0.75],
                vec![33.0, 33.5],
            ],
            label: Label::AcuteEpisode,
            split: Split::Val,
            ssl_split: Split::None,
            ibi: vec![IbiEvent { offset_s: 0.5, ibi_s: 0.8 }],
        };
        let meta = StoreMeta { segmentation: SegmentationConfig { omega_s: 2, delta_s: 1 }, seed: 9 };
        write_store(dir.path(), &meta, std::slice::from_ref(&seg)).unwrap();
        let (m2, back) = read_store(dir.path()).unwrap();
        assert_eq!(m2, meta);
        assert_eq!(back, vec![seg]);
    }
}
