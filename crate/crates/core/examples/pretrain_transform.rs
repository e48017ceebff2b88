//! Transformation-prediction pretraining: one six-way label per channel.
//!
//! ```text
//! cargo run --release --example pretrain_transform [work_dir]
//! ```

mod common;

use e4ssl::pipeline::{self, PretextTask};

fn main() -> e4ssl::Result<()> {
    common::init_logging();
    let work = common::work_dir("models");
    let store = common::prepared_store(&work)?;
    let out = work.join("transform.ckpt");
    let report = pipeline::cmd_pretrain(&store, PretextTask::Transform, None, &common::small_config()?, &out)?;
    print!("{}", report.summary());
    println!("checkpoint: {}", out.display());
    Ok(())
}
