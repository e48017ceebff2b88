//! The two pretext inputs: run masks at each channel rate and the six
//! per-channel transforms.
//!
//! ```text
//! cargo run --release --example pretext_sampling
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use e4ssl::pretext::transforms::{Transform, TransformParams};
use e4ssl::pretext::{sample_mask, MaskSpec};

fn main() -> e4ssl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = MaskSpec::default();
    for rate in [1usize, 4, 32, 64] {
        let mask = sample_mask(60 * rate, rate as f64, &spec, &mut rng);
        // one character per second: '#' if any sample in it is masked
        let line: String = mask.chunks(rate).map(|s| if s.iter().any(|&m| m) { '#' } else { '.' }).collect();
        println!("{rate:>3} Hz {line}");
    }

    let x: Vec<f64> = (0..64).map(|i| (i as f64 / 4.0).sin()).collect();
    let params = TransformParams::default();
    for t in Transform::ALL {
        let y = t.apply(&x, &params, &mut rng)?;
        let dist = (x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
        println!("{:<14} label {} rms change {dist:.3}", format!("{t:?}"), t.index());
    }
    Ok(())
}
