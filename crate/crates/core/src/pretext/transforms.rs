//! The six channel transformations of the transformation-prediction task.
//! Every transform preserves channel length.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transform {
    Identity,
    Noise,
    MagnitudeWarp,
    Permute,
    TimeWarp,
    Crop,
}

impl Transform {
    pub const ALL: [Transform; 6] = [
        Transform::Identity,
        Transform::Noise,
        Transform::MagnitudeWarp,
        Transform::Permute,
        Transform::TimeWarp,
        Transform::Crop,
    ];

    pub fn index(self) -> usize {
        Transform::ALL.iter().position(|&t| t == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<Transform> {
        Transform::ALL.get(i).copied()
    }

    pub fn apply<R: Rng + ?Sized>(self, x: &[f64], params: &TransformParams, rng: &mut R) -> Result<Vec<f64>> {
        match self {
            Transform::Identity => Ok(x.to_vec()),
            Transform::Noise => add_noise(x, params.noise_sigma, rng),
            Transform::MagnitudeWarp => magnitude_warp(x, params.warp_knots, params.warp_sigma, rng),
            Transform::Permute => permute(x, params.permute_pieces, rng),
            Transform::TimeWarp => time_warp(x, params.warp_knots, params.warp_sigma, rng),
            Transform::Crop => crop(x, params.crop_ratio, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformParams {
    pub noise_sigma: f64,
    pub warp_knots: usize,
    pub warp_sigma: f64,
    pub permute_pieces: usize,
    pub crop_ratio: f64,
}

impl Default for TransformParams {
    fn default() -> Self {
        TransformParams { noise_sigma: 0.05, warp_knots: 4, warp_sigma: 0.2, permute_pieces: 4, crop_ratio: 0.5 }
    }
}

fn need(x: &[f64], needed: usize) -> Result<()> {
    if x.len() < needed.max(1) {
        Err(Error::ChannelTooShort { len: x.len(), needed: needed.max(1) })
    } else {
        Ok(())
    }
}

fn normal(mean: f64, sigma: f64) -> Normal<f64> {
    Normal::new(mean, sigma.max(0.0)).expect("finite sigma")
}

pub fn add_noise<R: Rng + ?Sized>(x: &[f64], sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    need(x, 1)?;
    if sigma == 0.0 {
        return Ok(x.to_vec());
    }
    let n = normal(0.0, sigma);
    Ok(x.iter().map(|v| v + n.sample(rng)).collect())
}

/// Natural cubic spline through `(xs[i], ys[i])`, evaluated at `at`.
pub fn natural_cubic_spline(xs: &[f64], ys: &[f64], at: impl Iterator<Item = f64>) -> Vec<f64> {
    let n = xs.len();
    assert!(n >= 2 && ys.len() == n);
    // second derivatives via the tridiagonal system, natural boundary
    let mut m = vec![0.0; n];
    if n > 2 {
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let mut diag = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        for i in 1..n - 1 {
            diag[i] = 2.0 * (h[i - 1] + h[i]);
            rhs[i] = 6.0 * ((ys[i + 1] - ys[i]) / h[i] - (ys[i] - ys[i - 1]) / h[i - 1]);
        }
        for i in 2..n - 1 {
            let w = h[i - 1] / diag[i - 1];
            diag[i] -= w * h[i - 1];
            rhs[i] -= w * rhs[i - 1];
        }
        for i in (1..n - 1).rev() {
            let upper = if i + 1 < n - 1 { h[i] * m[i + 1] } else { 0.0 };
            m[i] = (rhs[i] - upper) / diag[i];
        }
    }
    at.map(|t| {
        let k = match xs.iter().position(|&x| x > t) {
            Some(0) => 0,
            Some(j) => j - 1,
            None => n - 2,
        }
        .min(n - 2);
        let h = xs[k + 1] - xs[k];
        let a = (xs[k + 1] - t) / h;
        let b = (t - xs[k]) / h;
        a * ys[k] + b * ys[k + 1] + ((a * a * a - a) * m[k] + (b * b * b - b) * m[k + 1]) * h * h / 6.0
    })
    .collect()
}

fn knot_positions(len: usize, knots: usize) -> Vec<f64> {
    let span = (len - 1) as f64;
    (0..knots).map(|i| span * i as f64 / (knots - 1) as f64).collect()
}

fn random_curve<R: Rng + ?Sized>(len: usize, knots: usize, mean: f64, sigma: f64, rng: &mut R) -> Vec<f64> {
    if len == 1 {
        return vec![normal(mean, sigma).sample(rng)];
    }
    let knots = knots.max(2);
    let xs = knot_positions(len, knots);
    let dist = normal(mean, sigma);
    let ys: Vec<f64> = (0..knots).map(|_| dist.sample(rng)).collect();
    natural_cubic_spline(&xs, &ys, (0..len).map(|i| i as f64))
}

pub fn magnitude_warp<R: Rng + ?Sized>(x: &[f64], knots: usize, sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    need(x, knots)?;
    let curve = random_curve(x.len(), knots, 1.0, sigma, rng);
    Ok(x.iter().zip(curve).map(|(v, c)| v * c).collect())
}

fn interp(x: &[f64], t: f64) -> f64 {
    let last = x.len() - 1;
    let t = t.clamp(0.0, last as f64);
    let i = (t.floor() as usize).min(last);
    if i == last {
        return x[last];
    }
    let f = t - i as f64;
    x[i] * (1.0 - f) + x[i + 1] * f
}

/// Warps the time axis with a smooth random speed curve and resamples
/// linearly back onto the original grid.
pub fn time_warp<R: Rng + ?Sized>(x: &[f64], knots: usize, sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    need(x, knots.max(2))?;
    let speed = random_curve(x.len(), knots, 1.0, sigma, rng);
    let mut t = Vec::with_capacity(x.len());
    let mut acc = 0.0;
    t.push(0.0);
    for s in &speed[..x.len() - 1] {
        acc += s.max(0.05);
        t.push(acc);
    }
    let scale = (x.len() - 1) as f64 / acc;
    Ok(t.iter().map(|&ti| interp(x, ti * scale)).collect())
}

pub fn permute<R: Rng + ?Sized>(x: &[f64], pieces: usize, rng: &mut R) -> Result<Vec<f64>> {
    let pieces = pieces.max(1);
    need(x, pieces)?;
    if pieces == 1 {
        return Ok(x.to_vec());
    }
    let bounds: Vec<usize> = (0..=pieces).map(|i| i * x.len() / pieces).collect();
    let mut order: Vec<usize> = (0..pieces).collect();
    order.shuffle(rng);
    Ok(order.iter().flat_map(|&p| x[bounds[p]..bounds[p + 1]].iter().copied()).collect())
}

/// Keeps a random contiguous `ratio` of the channel, stretched to full length.
pub fn crop<R: Rng + ?Sized>(x: &[f64], ratio: f64, rng: &mut R) -> Result<Vec<f64>> {
    need(x, 2)?;
    let keep = ((x.len() as f64 * ratio).round() as usize).clamp(2, x.len());
    let start = rng.random_range(0..=x.len() - keep);
    let window = &x[start..start + keep];
    let step = (keep - 1) as f64 / (x.len() - 1) as f64;
    Ok((0..x.len()).map(|i| interp(window, i as f64 * step)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_like_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
        assert_eq!(Transform::Identity.apply(&x, &TransformParams::default(), &mut rng).unwrap(), x);
        assert_eq!(add_noise(&x, 0.0, &mut rng).unwrap(), x);
        assert_eq!(permute(&x, 1, &mut rng).unwrap(), x);
    }

    #[test]
    fn short_channels_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(permute(&[1.0, 2.0], 4, &mut rng), Err(Error::ChannelTooShort { .. })));
        assert!(matches!(magnitude_warp(&[1.0], 4, 0.2, &mut rng), Err(Error::ChannelTooShort { .. })));
        assert!(matches!(crop(&[1.0], 0.5, &mut rng), Err(Error::ChannelTooShort { .. })));
        assert!(matches!(add_noise(&[], 0.1, &mut rng), Err(Error::ChannelTooShort { .. })));
    }

    #[test]
    fn spline_interpolates_knots_and_lines() {
        let xs = [0.0, 1.0, 3.0, 4.0];
        let ys = [1.0, 2.0, 0.5, 1.5];
        let at = natural_cubic_spline(&xs, &ys, xs.iter().copied());
        for (a, b) in at.iter().zip(ys) {
            assert!((a - b).abs() < 1e-12);
        }
        let line = natural_cubic_spline(&xs, &[0.0, 2.0, 6.0, 8.0], [0.5, 2.0, 3.5].into_iter());
        for (t, v) in [0.5, 2.0, 3.5].iter().zip(line) {
            assert!((v - 2.0 * t).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_keeps_multiset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let mut y = permute(&x, 4, &mut rng).unwrap();
        y.sort_by(f64::total_cmp);
        assert_eq!(y, x);
    }

    #[test]
    fn crop_of_ramp_stays_ramp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..101).map(f64::from).collect();
        let y = crop(&x, 0.5, &mut rng).unwrap();
        let d = y[1] - y[0];
        assert!((d - 0.5).abs() < 1e-9);
        assert!(y.windows(2).all(|w| ((w[1] - w[0]) - d).abs() < 1e-9));
    }

    proptest! {
        #[test]
        fn transforms_preserve_length_and_finiteness(
            xs in prop::collection::vec(-10.0f64..10.0, 4..300),
            t in 0usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = Transform::from_index(t).unwrap().apply(&xs, &TransformParams::default(), &mut rng).unwrap();
            prop_assert_eq!(y.len(), xs.len());
            prop_assert!(y.iter().all(|v| v.is_finite()));
        }
    }
}
