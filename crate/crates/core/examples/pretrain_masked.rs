//! Masked-prediction pretraining on the pooled unlabelled and
//! target-train segments.
//!
//! ```text
//! cargo run --release --example pretrain_masked [work_dir]
//! ```

mod common;

use e4ssl::pipeline::{self, PretextTask};

fn main() -> e4ssl::Result<()> {
    common::init_logging();
    let work = common::work_dir("models");
    let store = common::prepared_store(&work)?;
    let out = work.join("masked.ckpt");
    let report = pipeline::cmd_pretrain(&store, PretextTask::Masked, None, &common::small_config()?, &out)?;
    print!("{}", report.summary());
    println!("checkpoint: {}", out.display());
    Ok(())
}
