//! Self-supervised pretext samples and their losses.
//!
//! Masked prediction zeroes geometric-length runs of each channel and asks the
//! model to reconstruct them. Transformation prediction applies one of six
//! transforms per channel and asks which one.

pub mod transforms;

use rand::Rng;
use rand_distr::{Distribution, Geometric};

use crate::error::{Error, Result};
pub use transforms::{Transform, TransformParams};

/// Masking ratio and mean masked run length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    /// Mean length of a masked run in seconds.
    pub mean_masked_s: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec { ratio: 0.15, mean_masked_s: 3.0 }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) || !(self.mean_masked_s > 0.0) {
            return Err(Error::Config(format!("invalid mask spec {self:?}")));
        }
        Ok(())
    }

    /// Mean unmasked run length in seconds, `l_m (1 - r) / r`.
    pub fn mean_unmasked_s(&self) -> f64 {
        self.mean_masked_s * (1.0 - self.ratio) / self.ratio
    }
}

fn run_length<R: Rng + ?Sized>(mean_samples: f64, rng: &mut R) -> usize {
    let p = (1.0 / mean_samples).clamp(f64::MIN_POSITIVE, 1.0);
    // Geometric counts failures before the first success: support {0, 1, ...}
    1 + Geometric::new(p).expect("valid p").sample(rng) as usize
}

/// Boolean mask (true = masked) of alternating runs with geometric lengths.
pub fn sample_mask<R: Rng + ?Sized>(len: usize, rate_hz: f64, spec: &MaskSpec, rng: &mut R) -> Vec<bool> {
    let mean_masked = spec.mean_masked_s * rate_hz;
    let mean_unmasked = spec.mean_unmasked_s() * rate_hz;
    let mut out = Vec::with_capacity(len);
    let mut masked = rng.random_bool(spec.ratio);
    while out.len() < len {
        let run = run_length(if masked { mean_masked } else { mean_unmasked }, rng);
        let take = run.min(len - out.len());
        out.extend(std::iter::repeat_n(masked, take));
        masked = !masked;
    }
    out
}

pub fn apply_mask(channel: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if channel.len() != mask.len() {
        return Err(Error::LengthMismatch { expected: channel.len(), actual: mask.len() });
    }
    Ok(channel.iter().zip(mask).map(|(&v, &m)| if m { 0.0 } else { v }).collect())
}

/// Root mean squared error over masked cells of all channels.
pub fn rmse_loss<P: AsRef<[f64]>, T: AsRef<[f64]>, M: AsRef<[bool]>>(pred: &[P], target: &[T], masks: &[M]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != masks.len() {
        return Err(Error::LengthMismatch { expected: pred.len(), actual: target.len().min(masks.len()) });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, t), m) in pred.iter().zip(target).zip(masks) {
        let (p, t, m) = (p.as_ref(), t.as_ref(), m.as_ref());
        if p.len() != t.len() || p.len() != m.len() {
            return Err(Error::LengthMismatch { expected: t.len(), actual: p.len() });
        }
        for i in 0..p.len() {
            if m[i] {
                let d = p[i] - t[i];
                sum += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((sum / count as f64).sqrt())
}

/// Numerically stable `log softmax(logits)[label]`.
pub fn log_softmax_at(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[label] - lse
}

/// Channel-averaged categorical cross-entropy.
pub fn multitask_cce<L: AsRef<[f64]>>(logits: &[L], labels: &[usize]) -> f64 {
    assert_eq!(logits.len(), labels.len());
    assert!(!labels.is_empty());
    let total: f64 = logits.iter().zip(labels).map(|(l, &y)| -log_softmax_at(l.as_ref(), y)).sum();
    total / labels.len() as f64
}

/// A model input built from one standardized segment.
#[derive(Debug, Clone, PartialEq)]
pub enum PretextSample {
    Masked {
        input: Vec<Vec<f64>>,
        masks: Vec<Vec<bool>>,
        target: Vec<Vec<f64>>,
    },
    Transformed {
        input: Vec<Vec<f64>>,
        labels: Vec<usize>,
    },
}

impl PretextSample {
    pub fn input(&self) -> &[Vec<f64>] {
        match self {
            PretextSample::Masked { input, .. } | PretextSample::Transformed { input, .. } => input,
        }
    }
}

/// Masks every channel independently at its own rate.
pub fn sample_masked<R: Rng + ?Sized>(
    channels: &[Vec<f64>],
    rates: &[usize],
    spec: &MaskSpec,
    rng: &mut R,
) -> PretextSample {
    let masks: Vec<Vec<bool>> = channels
        .iter()
        .zip(rates)
        .map(|(c, &r)| sample_mask(c.len(), r as f64, spec, rng))
        .collect();
    let input = channels
        .iter()
        .zip(&masks)
        .map(|(c, m)| apply_mask(c, m).expect("mask sized to channel"))
        .collect();
    PretextSample::Masked { input, masks, target: channels.to_vec() }
}

/// Draws one transform per channel uniformly and applies it.
pub fn sample_transform<R: Rng + ?Sized>(
    channels: &[Vec<f64>],
    params: &TransformParams,
    rng: &mut R,
) -> Result<PretextSample> {
    let mut input = Vec::with_capacity(channels.len());
    let mut labels = Vec::with_capacity(channels.len());
    for c in channels {
        let t = Transform::ALL[rng.random_range(0..Transform::ALL.len())];
        input.push(t.apply(c, params, rng)?);
        labels.push(t.index());
    }
    Ok(PretextSample::Transformed { input, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unmasked_mean_length() {
        assert!((MaskSpec::default().mean_unmasked_s() - 17.0).abs() < 1e-12);
    }

    #[test]
    fn mask_fraction_at_4hz() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = sample_mask(1_000_000, 4.0, &MaskSpec::default(), &mut rng);
        let frac = m.iter().filter(|&&b| b).count() as f64 / m.len() as f64;
        assert!((frac - 0.15).abs() < 0.01, "{frac}");
    }

    #[test]
    fn mask_is_seeded() {
        let a = sample_mask(5000, 32.0, &MaskSpec::default(), &mut ChaCha8Rng::seed_from_u64(2));
        let b = sample_mask(5000, 32.0, &MaskSpec::default(), &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
    }

    #[test]
    fn masking() {
        assert_eq!(apply_mask(&[1.0, 2.0, 3.0], &[false; 3]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(apply_mask(&[1.0, 2.0, 3.0], &[true; 3]).unwrap(), vec![0.0; 3]);
        assert_eq!(apply_mask(&[1.0, 2.0, 3.0], &[true, false, true]).unwrap(), vec![0.0, 2.0, 0.0]);
        assert!(matches!(apply_mask(&[1.0], &[true, false]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn rmse_examples() {
        let t = [vec![1.0, 2.0, 3.0]];
        assert_eq!(rmse_loss(&t, &t, &[vec![true, false, true]]).unwrap(), 0.0);
        assert_eq!(rmse_loss(&[vec![0.0]], &[vec![2.0]], &[vec![true]]).unwrap(), 2.0);
        let v = rmse_loss(&[vec![3.0, 0.0, 9.0]], &[vec![0.0, 4.0, 9.0]], &[vec![true, true, false]]).unwrap();
        assert!((v - 3.5355339059327378).abs() < 1e-12);
        assert!(matches!(rmse_loss(&t, &t, &[vec![false; 3]]), Err(Error::EmptyMask)));
    }

    #[test]
    fn cce_examples() {
        let uniform = vec![vec![0.0; 6]; 4];
        assert!((multitask_cce(&uniform, &[0, 1, 5, 3]) - 6f64.ln()).abs() < 1e-12);
        let confident = vec![vec![-1e3, 1e3, 0.0, 0.0, 0.0, 0.0]];
        assert!(multitask_cce(&confident, &[1]) < 1e-12);
        let a = multitask_cce(&[vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]], &[2]);
        let b = multitask_cce(&[vec![0.5, 2.0, 0.0, 0.0, 0.0, -1.0]], &[5]);
        let both = multitask_cce(&[vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0], vec![0.5, 2.0, 0.0, 0.0, 0.0, -1.0]], &[2, 5]);
        assert!((both - (a + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn transform_labels_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let channels = vec![vec![0.5; 16]; 6];
        let mut counts = [0usize; 6];
        for _ in 0..10_000 {
            let PretextSample::Transformed { input, labels } =
                sample_transform(&channels, &TransformParams::default(), &mut rng).unwrap()
            else {
                unreachable!()
            };
            assert_eq!(input.len(), 6);
            assert_eq!(labels.len(), 6);
            labels.iter().for_each(|&l| counts[l] += 1);
        }
        for c in counts {
            assert!((c as f64 / 60_000.0 - 1.0 / 6.0).abs() < 0.01);
        }
    }

    proptest! {
        #[test]
        fn rmse_non_negative_zero_iff_equal(
            t in prop::collection::vec(-5.0f64..5.0, 1..50),
            noise in prop::collection::vec(-1.0f64..1.0, 50),
            mask_bits in prop::collection::vec(any::<bool>(), 50),
        ) {
            let n = t.len();
            let mut mask = mask_bits[..n].to_vec();
            mask[0] = true;
            let p: Vec<f64> = t.iter().zip(&noise).map(|(a, b)| a + b).collect();
            let l = rmse_loss(&[p.clone()], &[t.clone()], &[mask.clone()]).unwrap();
            prop_assert!(l >= 0.0);
            let differs = (0..n).any(|i| mask[i] && p[i] != t[i]);
            prop_assert_eq!(l == 0.0, !differs);
        }
    }
}
