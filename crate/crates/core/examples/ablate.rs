//! Unlabelled-data ablation: pretrain and fine-tune with growing fractions
//! of the unlabelled recordings.
//!
//! ```text
//! cargo run --release --example ablate [work_dir]
//! ```

mod common;

use e4ssl::pipeline;

fn main() -> e4ssl::Result<()> {
    common::init_logging();
    let work = common::work_dir("ablate");
    let store = common::prepared_store(&work)?;
    let report = pipeline::cmd_ablate(&store, &[0.0, 0.5, 1.0], None, &common::small_config()?, &work.join("ablation"))?;
    print!("{}", report.to_text());
    Ok(())
}
