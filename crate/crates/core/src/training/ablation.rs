//! Stratified resampling of unlabelled recordings for the data ablation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::stream_rng;

pub const FRACTIONS: [f64; 5] = [0.8, 0.6, 0.4, 0.2, 0.0];

/// `ceil(f * n)`, robust to representation error in `f`.
pub fn kept_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let c = (x - 1e-9).ceil().max(0.0) as usize;
    c.min(n)
}

/// Recording ids kept at `fraction`, sampled per dataset tag from
/// `(recording_id, dataset_tag)` pairs. Output is sorted.
pub fn stratified_subset(recordings: &[(String, String)], fraction: f64, seed: u64) -> Vec<String> {
    let mut by_tag: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (id, tag) in recordings {
        by_tag.entry(tag.as_str()).or_default().push(id.as_str());
    }
    let mut kept = Vec::new();
    for (tag, mut ids) in by_tag {
        ids.sort_unstable();
        ids.dedup();
        ids.shuffle(&mut stream_rng(seed, "ablation", &[super::id_hash(tag)]));
        kept.extend(ids[..kept_count(fraction, ids.len())].iter().map(|s| s.to_string()));
    }
    kept.sort();
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool() -> Vec<(String, String)> {
        let mut v = Vec::new();
        for i in 0..10 {
            v.push((format!("a{i}"), "A".to_string()));
        }
        for i in 0..5 {
            v.push((format!("b{i}"), "B".to_string()));
        }
        v
    }

    #[test]
    fn counts_per_dataset() {
        assert_eq!(kept_count(0.8, 10), 8);
        assert_eq!(kept_count(0.6, 5), 3);
        assert_eq!(kept_count(0.2, 5), 1);
        assert_eq!(kept_count(0.0, 5), 0);
        for f in FRACTIONS {
            let kept = stratified_subset(&pool(), f, 1);
            let a = kept.iter().filter(|s| s.starts_with('a')).count();
            let b = kept.iter().filter(|s| s.starts_with('b')).count();
            assert_eq!((a, b), (kept_count(f, 10), kept_count(f, 5)));
        }
    }

    #[test]
    fn zero_keeps_nothing_and_is_deterministic() {
        assert!(stratified_subset(&pool(), 0.0, 3).is_empty());
        assert_eq!(stratified_subset(&pool(), 0.4, 3), stratified_subset(&pool(), 0.4, 3));
    }
}
