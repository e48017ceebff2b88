//! Optimization loops, the unlabelled-data ablation and embedding export.

pub mod ablation;
pub mod config;
pub mod optim;
pub mod trainer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::segmentation::{Segment, Standardizer};

pub use config::{Preset, Regularization, TrainConfig, TrainMode};
pub use trainer::{
    embed, fine_tune, linear_readout, predict, pretext_loss, train, EpochRecord, PlateauSchedule, PretextOptions,
    ScheduleDecision, StopReason, TrainReport,
};

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// An independent RNG stream keyed by `(seed, tag, parts)`, so results do not
/// depend on the order in which streams are drawn.
pub fn stream_rng(seed: u64, tag: &str, parts: &[u64]) -> ChaCha8Rng {
    let mut h = fnv1a(&seed.to_le_bytes(), 0xcbf2_9ce4_8422_2325);
    h = fnv1a(tag.as_bytes(), h);
    for p in parts {
        h = fnv1a(&p.to_le_bytes(), h);
    }
    ChaCha8Rng::seed_from_u64(h)
}

pub fn id_hash(id: &str) -> u64 {
    fnv1a(id.as_bytes(), 0xcbf2_9ce4_8422_2325)
}

/// A standardized model input with its bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub subject_id: String,
    /// ACC_X, ACC_Y, ACC_Z, BVP, EDA, TEMP.
    pub channels: Vec<Vec<f64>>,
    /// 1 = acute episode, 0 = euthymia, `None` when unlabelled.
    pub label: Option<usize>,
}

impl Example {
    pub fn from_segment(segment: &Segment, standardizer: &Standardizer) -> Self {
        let s = crate::segmentation::standardize(segment, standardizer);
        Example {
            id: s.id,
            subject_id: s.subject_id,
            channels: s.channels.iter().map(|c| c.iter().map(|&v| f64::from(v)).collect()).collect(),
            label: segment.label.target().map(usize::from),
        }
    }
}
