//! Supervised training from scratch, then linear readout and fine-tuning
//! from a masked-prediction checkpoint.
//!
//! ```text
//! cargo run --release --example target_training [work_dir]
//! ```

mod common;

use e4ssl::pipeline::{self, PretextTask, TargetMode};

fn main() -> e4ssl::Result<()> {
    common::init_logging();
    let work = common::work_dir("models");
    let store = common::prepared_store(&work)?;
    let cfg = common::small_config()?;
    let pretrained = work.join("masked.ckpt");
    if !pretrained.exists() {
        pipeline::cmd_pretrain(&store, PretextTask::Masked, None, &cfg, &pretrained)?;
    }

    for (mode, ckpt) in [(TargetMode::Supervised, None), (TargetMode::Readout, Some(pretrained.as_path())), (TargetMode::Finetune, Some(pretrained.as_path()))] {
        let out = work.join(format!("{mode:?}.ckpt").to_lowercase());
        let (report, metrics) = pipeline::cmd_train(&store, mode, ckpt, None, &cfg, &out)?;
        println!(
            "{mode:?}: {} epochs, test segment accuracy {:.4}, subject accuracy {:.4}",
            report.epochs.len(),
            metrics.segment.accuracy,
            metrics.subject.accuracy
        );
    }
    Ok(())
}
