//! One function per pipeline stage. The command-line tool is a thin layer
//! over these.
//!
//! Pretext tasks read inputs standardized with the SSL-train statistics, the
//! target task with the target-train statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::e4mer::{checkpoint, E4mer, E4merConfig, HeadKind};
use crate::error::{Error, Result};
use crate::features::{column_means, extract_all, impute, write_features_csv};
use crate::ingest::{align, load_recording, read_manifest, Label};
use crate::metrics::{evaluate, pearson, MetricsReport, SegmentPrediction};
use crate::pretext::transforms::TransformParams;
use crate::pretext::MaskSpec;
use crate::segmentation::{
    fit_standardizer, slice_segments, ssl_split, time_split, Segment, SegmentationConfig, Split, Standardizer,
};
use crate::store::{self, StoreMeta, SSL_STANDARDIZER, TARGET_STANDARDIZER};
use crate::training::ablation::stratified_subset;
use crate::training::config::parse_key_values;
use crate::training::{
    fine_tune, linear_readout, predict, pretext_loss, stream_rng, train, Example, Preset, PretextOptions,
    TrainConfig, TrainMode, TrainReport,
};
use crate::wear_state::{label_recording, summarize_hours, HoursSummary};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "E4SSL_CONFIG";

const MODEL_KEYS: [&str; 10] = [
    "num_filters",
    "d_model",
    "num_heads",
    "num_blocks",
    "attention_dropout",
    "drop_path",
    "mlp_dim",
    "mlp_dropout",
    "disable_bias",
    "omega_s",
];
const TRAIN_KEYS: [&str; 8] = [
    "learning_rate",
    "weight_decay",
    "max_epochs",
    "batch_size",
    "lr_decay_factor",
    "patience_epochs",
    "max_reductions",
    "min_delta",
];

/// Settings shared by all commands. Model and training keys override the
/// preset chosen per command.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub segmentation: SegmentationConfig,
    pub pretext: PretextOptions,
    pub seed: u64,
    pub model_overrides: BTreeMap<String, String>,
    pub train_overrides: BTreeMap<String, String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            segmentation: SegmentationConfig::default(),
            pretext: PretextOptions::default(),
            seed: 0,
            model_overrides: BTreeMap::new(),
            train_overrides: BTreeMap::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for {key}")))
}

impl PipelineConfig {
    pub fn from_key_values(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = PipelineConfig::default();
        c.apply(kv)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_key_values(&parse_key_values(&text)?)
    }

    /// Applies `kv` over the current values.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        let t = &mut self.pretext.transforms;
        for (k, v) in kv {
            match k.as_str() {
                "omega" => self.segmentation.omega_s = parse(k, v)?,
                "delta" => self.segmentation.delta_s = parse(k, v)?,
                "mask_ratio" => self.pretext.mask.ratio = parse(k, v)?,
                "mask_mean_len" => self.pretext.mask.mean_masked_s = parse(k, v)?,
                "freeze_masks" => self.pretext.freeze_masks = parse(k, v)?,
                "noise_sigma" => t.noise_sigma = parse(k, v)?,
                "warp_knots" => t.warp_knots = parse(k, v)?,
                "warp_sigma" => t.warp_sigma = parse(k, v)?,
                "permute_pieces" => t.permute_pieces = parse(k, v)?,
                "crop_ratio" => t.crop_ratio = parse(k, v)?,
                "seed" => self.seed = parse(k, v)?,
                m if MODEL_KEYS.contains(&m) || m.starts_with("rate_") => {
                    self.model_overrides.insert(k.clone(), v.clone());
                }
                m if TRAIN_KEYS.contains(&m) => {
                    self.train_overrides.insert(k.clone(), v.clone());
                }
                other => return Err(Error::Config(format!("unknown config key `{other}`"))),
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.segmentation.validate()?;
        self.pretext.mask.validate()
    }

    /// Preset architecture with overrides, shaped to the store's segments.
    pub fn model_config(&self, base: &E4merConfig, omega_s: usize, rates: [usize; 6]) -> Result<E4merConfig> {
        let mut c = E4merConfig::from_key_values(&self.model_overrides, base)?;
        c.omega_s = omega_s;
        c.rates = rates;
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self, preset: Preset) -> Result<TrainConfig> {
        let mut c = preset.train_config();
        c.seed = self.seed;
        c.apply_key_values(&self.train_overrides)?;
        Ok(c)
    }

    pub fn mask(&self) -> MaskSpec {
        self.pretext.mask
    }

    pub fn transforms(&self) -> TransformParams {
        self.pretext.transforms
    }
}

/// `<path><suffix>`, e.g. `model.ckpt` to `model.ckpt.log`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordingSummary {
    pub recording_id: String,
    pub hours: HoursSummary,
    pub segments: usize,
}

/// Ingest, wear-state labelling, slicing, splitting and standardizer fitting.
/// Writes the segment store, one timeline per recording under
/// `<store>/timelines/` and `<store>/hours.tsv`.
pub fn cmd_preprocess(manifest: &Path, store_root: &Path, cfg: &PipelineConfig) -> Result<Vec<RecordingSummary>> {
    cfg.validate()?;
    let metas = read_manifest(manifest)?;
    let per_recording: Vec<(RecordingSummary, String, Vec<Segment>)> = metas
        .par_iter()
        .map(|meta| {
            let ctx = |e: Error| e.context(format!("recording {}", meta.id));
            let rec = align(&load_recording(&meta.path, meta).map_err(ctx)?).map_err(ctx)?;
            let timeline = label_recording(&rec).map_err(ctx)?;
            let mut segs = slice_segments(&rec, &timeline, &cfg.segmentation).map_err(ctx)?;
            if meta.label.target().is_some() {
                time_split(&mut segs);
            }
            let summary = RecordingSummary {
                recording_id: meta.id.clone(),
                hours: summarize_hours(&timeline),
                segments: segs.len(),
            };
            Ok((summary, timeline.to_string(), segs))
        })
        .collect::<Result<_>>()?;

    let ids: Vec<String> = per_recording.iter().map(|(s, _, _)| s.recording_id.clone()).collect();
    let (_, ssl_val) = ssl_split(&ids, cfg.seed)?;
    let mut segments = Vec::new();
    let mut summaries = Vec::new();
    let timelines = store_root.join("timelines");
    let mut hours = String::from("recording_id\toffbody_h\tsleep_h\twake_h\tsegments\n");
    for (summary, timeline, segs) in per_recording {
        if summary.segments == 0 {
            log::warn!("recording {} yields no segments", summary.recording_id);
        }
        write(&timelines.join(format!("{}.txt", summary.recording_id)), timeline)?;
        let _ = writeln!(
            hours,
            "{}\t{:.4}\t{:.4}\t{:.4}\t{}",
            summary.recording_id, summary.hours.offbody_h, summary.hours.sleep_h, summary.hours.wake_h, summary.segments
        );
        let in_val = ssl_val.binary_search(&summary.recording_id).is_ok();
        for mut seg in segs {
            // the pretraining pool is every unlabelled segment plus target-train
            let pooled = seg.label == Label::Unlabelled || seg.split == Split::Train;
            seg.ssl_split = match (pooled, in_val) {
                (false, _) => Split::None,
                (true, false) => Split::Train,
                (true, true) => Split::Val,
            };
            segments.push(seg);
        }
        summaries.push(summary);
    }
    write(&store_root.join("hours.tsv"), hours)?;
    store::write_store(store_root, &StoreMeta { segmentation: cfg.segmentation, seed: cfg.seed }, &segments)?;

    let standardizer = |pick: &dyn Fn(&Segment) -> bool| -> Result<Standardizer> {
        let chosen: Vec<&Segment> = segments.iter().filter(|s| pick(s)).collect();
        if chosen.is_empty() {
            log::warn!("no segments to fit a standardizer on; using identity");
            return Ok(Standardizer::identity());
        }
        fit_standardizer(chosen.iter().copied())
    };
    let target = standardizer(&|s| s.label.target().is_some() && s.split == Split::Train)?;
    let ssl = standardizer(&|s| s.ssl_split == Split::Train)?;
    store::write_standardizer(store_root, TARGET_STANDARDIZER, &target)?;
    store::write_standardizer(store_root, SSL_STANDARDIZER, &ssl)?;
    Ok(summaries)
}

/// A loaded segment store with both standardizers.
#[derive(Debug, Clone)]
pub struct StoreData {
    pub meta: StoreMeta,
    pub segments: Vec<Segment>,
    pub target: Standardizer,
    pub ssl: Standardizer,
}

impl StoreData {
    pub fn load(root: &Path) -> Result<Self> {
        let (meta, segments) = store::read_store(root)?;
        Ok(StoreData {
            meta,
            segments,
            target: store::read_standardizer(root, TARGET_STANDARDIZER)?,
            ssl: store::read_standardizer(root, SSL_STANDARDIZER)?,
        })
    }

    pub fn rates(&self) -> Result<[usize; 6]> {
        self.segments.first().map(|s| s.rates).ok_or(Error::EmptyPool)
    }

    /// Labelled segments of one target split, target-standardized.
    pub fn target_examples(&self, split: Split) -> Vec<Example> {
        self.examples(|s| s.label.target().is_some() && s.split == split, &self.target)
    }

    /// Pretraining pool segments of one SSL split, SSL-standardized.
    pub fn ssl_examples(&self, split: Split) -> Vec<Example> {
        self.examples(|s| s.ssl_split == split, &self.ssl)
    }

    pub fn examples(&self, pick: impl Fn(&Segment) -> bool + Sync, st: &Standardizer) -> Vec<Example> {
        self.segments.par_iter().filter(|s| pick(s)).map(|s| Example::from_segment(s, st)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretextTask {
    Masked,
    Transform,
}

impl PretextTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(PretextTask::Masked),
            "transform" => Ok(PretextTask::Transform),
            _ => Err(Error::Config(format!("unknown pretext task `{s}`, expected masked or transform"))),
        }
    }

    pub fn mode(self) -> TrainMode {
        match self {
            PretextTask::Masked => TrainMode::PretrainMasked,
            PretextTask::Transform => TrainMode::PretrainTransform,
        }
    }

    pub fn head(self) -> HeadKind {
        match self {
            PretextTask::Masked => HeadKind::Reconstruction,
            PretextTask::Transform => HeadKind::Transform,
        }
    }

    fn default_preset(self) -> Preset {
        match self {
            PretextTask::Masked => Preset::Mp,
            PretextTask::Transform => Preset::Tp,
        }
    }
}

fn build_model(cfg: &PipelineConfig, preset: Preset, data: &StoreData, head: HeadKind) -> Result<E4mer> {
    let base = preset
        .model_config()
        .ok_or_else(|| Error::Config(format!("preset {} does not define an architecture", preset.name())))?;
    let mc = cfg.model_config(&base, data.meta.segmentation.omega_s, data.rates()?)?;
    E4mer::new(mc, head, &mut stream_rng(cfg.seed, "init", &[]))
}

/// Pretrains on `train` and validates on `val`, then logs the pretext loss on
/// the target validation split as `target_val_loss`.
pub fn pretrain_on(
    data: &StoreData,
    train_set: &[Example],
    val_set: &[Example],
    task: PretextTask,
    preset: Preset,
    cfg: &PipelineConfig,
) -> Result<(E4mer, TrainReport)> {
    let tc = cfg.train_config(preset)?;
    if tc.mode != task.mode() {
        return Err(Error::Config(format!("preset {} does not pretrain the {:?} task", preset.name(), task)));
    }
    let mut model = build_model(cfg, preset, data, task.head())?;
    let mut report = train(&mut model, train_set, val_set, &tc, &cfg.pretext)?;
    let target_val = data.examples(|s| s.label.target().is_some() && s.split == Split::Val, &data.ssl);
    if !target_val.is_empty() {
        let l = pretext_loss(&model, &target_val, tc.mode, &cfg.pretext, tc.seed, tc.batch_size)?;
        report.extra.push(("target_val_loss".into(), l));
    }
    Ok((model, report))
}

/// Self-supervised pretraining on the SSL pool. Writes the checkpoint and
/// `<checkpoint>.log`.
pub fn cmd_pretrain(
    store_root: &Path,
    task: PretextTask,
    preset: Option<Preset>,
    cfg: &PipelineConfig,
    checkpoint_out: &Path,
) -> Result<TrainReport> {
    let data = StoreData::load(store_root)?;
    let preset = preset.unwrap_or(task.default_preset());
    let (model, report) =
        pretrain_on(&data, &data.ssl_examples(Split::Train), &data.ssl_examples(Split::Val), task, preset, cfg)?;
    checkpoint::save(&model, checkpoint_out)?;
    write(&sidecar(checkpoint_out, ".log"), report.to_log())?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    Supervised,
    Readout,
    Finetune,
}

impl TargetMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(TargetMode::Supervised),
            "readout" => Ok(TargetMode::Readout),
            "finetune" => Ok(TargetMode::Finetune),
            _ => Err(Error::Config(format!("unknown mode `{s}`, expected supervised, readout or finetune"))),
        }
    }
}

fn default_target_preset(mode: TargetMode, pretrained: Option<&E4mer>) -> Preset {
    let masked = pretrained.is_none_or(|m| m.head() != HeadKind::Transform);
    match (mode, masked) {
        (TargetMode::Supervised, _) => Preset::Sl,
        (TargetMode::Readout, true) => Preset::MpReadout,
        (TargetMode::Readout, false) => Preset::TpReadout,
        (TargetMode::Finetune, true) => Preset::MpFt,
        (TargetMode::Finetune, false) => Preset::TpFt,
    }
}

/// Segment predictions of a classifier over `examples`.
pub fn predictions(model: &E4mer, examples: &[Example], batch_size: usize) -> Result<Vec<SegmentPrediction>> {
    if model.head() != HeadKind::Classifier {
        return Err(Error::ConfigMismatch(format!("evaluation needs a classifier, model has {}", model.head().as_str())));
    }
    let probs = predict(model, examples, batch_size)?;
    examples
        .iter()
        .zip(probs)
        .map(|(e, p)| {
            let y = e.label.ok_or_else(|| Error::Config(format!("segment {} has no label", e.id)))?;
            Ok(SegmentPrediction {
                segment_id: e.id.clone(),
                subject_id: e.subject_id.clone(),
                true_label: y as u8,
                p_acute: p[1],
            })
        })
        .collect()
}

/// Metrics of a classifier on the target test split.
pub fn evaluate_model(model: &E4mer, data: &StoreData) -> Result<MetricsReport> {
    let test = data.target_examples(Split::Test);
    if test.is_empty() {
        return Err(Error::EmptyInput);
    }
    evaluate(&predictions(model, &test, 256)?)
}

/// Trains a target-task model from the labelled splits.
pub fn train_target(
    data: &StoreData,
    mode: TargetMode,
    pretrained: Option<&E4mer>,
    preset: Option<Preset>,
    cfg: &PipelineConfig,
) -> Result<(E4mer, TrainReport)> {
    let preset = preset.unwrap_or(default_target_preset(mode, pretrained));
    let tc = cfg.train_config(preset)?;
    let train_set = data.target_examples(Split::Train);
    let val_set = data.target_examples(Split::Val);
    match (mode, pretrained) {
        (TargetMode::Supervised, _) => {
            if tc.mode != TrainMode::Supervised {
                return Err(Error::Config(format!("preset {} is not a supervised preset", preset.name())));
            }
            let mut model = build_model(cfg, preset, data, HeadKind::Classifier)?;
            let report = train(&mut model, &train_set, &val_set, &tc, &PretextOptions::default())?;
            Ok((model, report))
        }
        (_, None) => Err(Error::Config("readout and finetune need a pretrained checkpoint".into())),
        (TargetMode::Readout, Some(p)) => linear_readout(p, &train_set, &val_set, &tc),
        (TargetMode::Finetune, Some(p)) => fine_tune(p, &train_set, &val_set, &tc, preset.regularization()),
    }
}

/// Target-task training. Writes the checkpoint, `<checkpoint>.log` and the
/// test-split metrics to `<checkpoint>.metrics.txt`.
pub fn cmd_train(
    store_root: &Path,
    mode: TargetMode,
    pretrained: Option<&Path>,
    preset: Option<Preset>,
    cfg: &PipelineConfig,
    checkpoint_out: &Path,
) -> Result<(TrainReport, MetricsReport)> {
    let data = StoreData::load(store_root)?;
    let pretrained = pretrained.map(checkpoint::load).transpose()?;
    let (model, report) = train_target(&data, mode, pretrained.as_ref(), preset, cfg)?;
    let metrics = evaluate_model(&model, &data)?;
    checkpoint::save(&model, checkpoint_out)?;
    write(&sidecar(checkpoint_out, ".log"), report.to_log())?;
    write(&sidecar(checkpoint_out, ".metrics.txt"), metrics.to_text())?;
    Ok((report, metrics))
}

/// Scores a classifier checkpoint on the test split and writes the report.
pub fn cmd_evaluate(checkpoint_path: &Path, store_root: &Path, report_out: &Path) -> Result<MetricsReport> {
    let model = checkpoint::load(checkpoint_path)?;
    let data = StoreData::load(store_root)?;
    let report = evaluate_model(&model, &data)?;
    write(report_out, report.to_text())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub fraction: f64,
    pub recordings_kept: usize,
    pub pretrain_segments: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Pearson correlation of fraction against test segment accuracy.
    pub correlation: Option<f64>,
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("fraction\trecordings_kept\tpretrain_segments\tsegment_accuracy\tsubject_accuracy\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:.2}\t{}\t{}\t{:.6}\t{:.6}",
                r.fraction, r.recordings_kept, r.pretrain_segments, r.metrics.segment.accuracy, r.metrics.subject.accuracy
            );
        }
        match self.correlation {
            Some(c) => {
                let _ = writeln!(s, "# pearson_r: {c:.6}");
            }
            None => s.push_str("# pearson_r: missing\n"),
        }
        s
    }
}

/// Repeats pretraining and fine-tuning with stratified subsets of the
/// unlabelled recordings. The target-train segments are always kept.
pub fn cmd_ablate(
    store_root: &Path,
    fractions: &[f64],
    preset: Option<Preset>,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<AblationReport> {
    let data = StoreData::load(store_root)?;
    let preset = preset.unwrap_or(Preset::MpFt);
    let task = match preset {
        Preset::MpFt | Preset::MpReadout => PretextTask::Masked,
        Preset::TpFt | Preset::TpReadout => PretextTask::Transform,
        other => return Err(Error::Config(format!("ablation needs a fine-tune or readout preset, got {}", other.name()))),
    };
    let mode = if matches!(preset, Preset::MpReadout | Preset::TpReadout) { TargetMode::Readout } else { TargetMode::Finetune };
    let mut pool: Vec<(String, String)> = data
        .segments
        .iter()
        .filter(|s| s.label == Label::Unlabelled)
        .map(|s| (s.recording_id.clone(), s.dataset_tag.clone()))
        .collect();
    pool.sort();
    pool.dedup();

    let mut rows = Vec::new();
    for &f in fractions {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("fraction {f} outside [0, 1]")));
        }
        let kept = stratified_subset(&pool, f, cfg.seed);
        let pick = |split: Split| {
            let kept = &kept;
            move |s: &Segment| {
                s.ssl_split == split && (s.label != Label::Unlabelled || kept.binary_search(&s.recording_id).is_ok())
            }
        };
        let train_set = data.examples(pick(Split::Train), &data.ssl);
        let mut val_set = data.examples(pick(Split::Val), &data.ssl);
        if val_set.is_empty() {
            val_set = data.examples(|s| s.label.target().is_some() && s.split == Split::Val, &data.ssl);
        }
        log::info!("ablation f={f:.2}: {} recordings kept, {} pretraining segments", kept.len(), train_set.len());
        let (pretrained, _) = pretrain_on(&data, &train_set, &val_set, task, task.default_preset(), cfg)?;
        let (model, _) = train_target(&data, mode, Some(&pretrained), Some(preset), cfg)?;
        let metrics = evaluate_model(&model, &data)?;
        write(&out_dir.join(format!("fraction_{f:.2}.txt")), metrics.to_text())?;
        rows.push(AblationRow { fraction: f, recordings_kept: kept.len(), pretrain_segments: train_set.len(), metrics });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.fraction).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.metrics.segment.accuracy).collect();
    let report = AblationReport { rows, correlation: pearson(&xs, &ys) };
    write(&out_dir.join("ablation.tsv"), report.to_text())?;
    Ok(report)
}

/// Handcrafted features of every labelled segment, missing values filled with
/// target-train column means.
pub fn cmd_features(store_root: &Path, csv_out: &Path) -> Result<usize> {
    let (_, segments) = store::read_store(store_root)?;
    let labelled: Vec<Segment> = segments.into_iter().filter(|s| s.label.target().is_some()).collect();
    let rows = extract_all(&labelled);
    let train: Vec<_> = rows.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let rows = impute(&rows, &column_means(&train)?);
    if let Some(parent) = csv_out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_features_csv(&rows, csv_out)?;
    Ok(rows.len())
}

/// Encoder outputs averaged over the model axis, one TSV row per segment.
pub fn cmd_embed(checkpoint_path: &Path, store_root: &Path, tsv_out: &Path) -> Result<usize> {
    let model = checkpoint::load(checkpoint_path)?;
    let data = StoreData::load(store_root)?;
    let examples = data.examples(|_| true, &data.target);
    let vectors = crate::training::embed(&model, &examples, 256)?;
    let n = model.config().omega_s;
    let mut s = String::from("segment_id\tsubject_id\tdataset_tag\tlabel\tsplit");
    for t in 0..n {
        let _ = write!(s, "\te{t}");
    }
    s.push('\n');
    for ((seg, _), v) in data.segments.iter().zip(&examples).zip(&vectors) {
        let _ = write!(s, "{}\t{}\t{}\t{}\t{}", seg.id, seg.subject_id, seg.dataset_tag, seg.label, seg.split);
        for x in v {
            let _ = write!(s, "\t{x}");
        }
        s.push('\n');
    }
    write(tsv_out, s)?;
    Ok(vectors.len())
}

/// Synthetic raw archives plus a manifest under `out_dir`.
pub fn cmd_synth(spec: &crate::synth::SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    crate::synth::generate(spec, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthSpec;

    fn kv(s: &str) -> BTreeMap<String, String> {
        parse_key_values(s).unwrap()
    }

    #[test]
    fn config_routes_keys() {
        let c = PipelineConfig::from_key_values(&kv("omega=32\ndelta=16\nd_model=8\nmax_epochs=3\nseed=4")).unwrap();
        assert_eq!(c.segmentation, SegmentationConfig { omega_s: 32, delta_s: 16 });
        assert_eq!(c.seed, 4);
        assert_eq!(c.model_overrides["d_model"], "8");
        assert_eq!(c.train_config(Preset::Sl).unwrap().max_epochs, 3);
        assert!(PipelineConfig::from_key_values(&kv("nonsense=1")).is_err());
        assert!(PipelineConfig::from_key_values(&kv("omega=8\ndelta=16")).is_err());
    }

    #[test]
    fn sidecar_appends() {
        assert_eq!(sidecar(Path::new("a/m.ckpt"), ".log"), PathBuf::from("a/m.ckpt.log"));
    }

    #[test]
    fn preprocess_fills_store_and_warns_on_empty() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            subjects_per_class: 1,
            duration_s: 900,
            unlabelled: vec![("u".into(), 1)],
            offbody: vec![],
            sleep: vec![],
            ..SynthSpec::default()
        };
        let manifest = cmd_synth(&spec, &dir.path().join("raw")).unwrap();
        let cfg = PipelineConfig::from_key_values(&kv("omega=60\ndelta=30")).unwrap();
        let store_root = dir.path().join("store");
        let summaries = cmd_preprocess(&manifest, &store_root, &cfg).unwrap();
        assert_eq!(summaries.len(), 3);
        assert!(summaries.iter().all(|s| s.segments == 29));
        let data = StoreData::load(&store_root).unwrap();
        assert_eq!(data.segments.len(), 87);
        assert!(data.segments.iter().all(|s| s.label != Label::Unlabelled || s.split == Split::None));
        assert!(!data.target_examples(Split::Test).is_empty());
        assert!(store_root.join("timelines").join("u_01.txt").exists());

        let first = fs::read(store_root.join("manifest.tsv")).unwrap();
        cmd_preprocess(&manifest, &store_root, &cfg).unwrap();
        assert_eq!(first, fs::read(store_root.join("manifest.tsv")).unwrap());
    }
}
