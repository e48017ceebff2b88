//! Writes synthetic E4 archives, then runs wear-state labelling,
//! segmentation and splitting into a segment store.
//!
//! ```text
//! cargo run --release --example synth_and_preprocess [work_dir]
//! ```

mod common;

use e4ssl::pipeline::{self, StoreData};
use e4ssl::segmentation::Split;

fn main() -> e4ssl::Result<()> {
    common::init_logging();
    let work = common::work_dir("preprocess");
    let manifest = pipeline::cmd_synth(&common::small_spec()?, &work.join("raw"))?;
    println!("raw manifest: {}", manifest.display());

    let summaries = pipeline::cmd_preprocess(&manifest, &work.join("store"), &common::small_config()?)?;
    println!("{:<16} {:>9} {:>8} {:>7} {:>9}", "recording", "offbody_h", "sleep_h", "wake_h", "segments");
    for s in &summaries {
        println!(
            "{:<16} {:>9.3} {:>8.3} {:>7.3} {:>9}",
            s.recording_id, s.hours.offbody_h, s.hours.sleep_h, s.hours.wake_h, s.segments
        );
    }

    let data = StoreData::load(&work.join("store"))?;
    let count = |f: &dyn Fn(&e4ssl::segmentation::Segment) -> bool| data.segments.iter().filter(|s| f(s)).count();
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("target {split:?}: {} segments", count(&|s| s.split == split));
    }
    for split in [Split::Train, Split::Val] {
        println!("pretraining {split:?}: {} segments", count(&|s| s.ssl_split == split));
    }
    Ok(())
}
