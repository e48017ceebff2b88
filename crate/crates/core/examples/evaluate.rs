//! Test-split metrics for a saved classifier checkpoint.
//!
//! ```text
//! cargo run --release --example evaluate [work_dir]
//! ```

mod common;

use e4ssl::pipeline::{self, TargetMode};

fn main() -> e4ssl::Result<()> {
    common::init_logging();
    let work = common::work_dir("models");
    let store = common::prepared_store(&work)?;
    let ckpt = work.join("supervised.ckpt");
    if !ckpt.exists() {
        pipeline::cmd_train(&store, TargetMode::Supervised, None, None, &common::small_config()?, &ckpt)?;
    }
    let metrics = pipeline::cmd_evaluate(&ckpt, &store, &work.join("report.txt"))?;
    print!("{}", metrics.to_text());
    for s in &metrics.subjects {
        println!("{} true {} predicted {} from {} segments", s.subject_id, s.true_label, s.predicted, s.n_segments);
    }
    Ok(())
}
