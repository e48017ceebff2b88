//! Per-segment encoder embeddings from a checkpoint, written as TSV.
//!
//! ```text
//! cargo run --release --example embed [work_dir]
//! ```

mod common;

use e4ssl::pipeline::{self, PretextTask};

fn main() -> e4ssl::Result<()> {
    common::init_logging();
    let work = common::work_dir("models");
    let store = common::prepared_store(&work)?;
    let ckpt = work.join("masked.ckpt");
    if !ckpt.exists() {
        pipeline::cmd_pretrain(&store, PretextTask::Masked, None, &common::small_config()?, &ckpt)?;
    }
    let out = work.join("embeddings.tsv");
    let n = pipeline::cmd_embed(&ckpt, &store, &out)?;
    println!("{n} embeddings written to {}", out.display());
    let text = std::fs::read_to_string(&out).map_err(|e| e4ssl::Error::io(&out, e))?;
    for line in text.lines().take(3) {
        println!("{}", line.chars().take(120).collect::<String>());
    }
    Ok(())
}
