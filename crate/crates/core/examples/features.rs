//! Handcrafted per-segment features from a segment store.
//!
//! ```text
//! cargo run --release --example features [work_dir]
//! ```

mod common;

use e4ssl::features::{feature_names, read_features_csv};
use e4ssl::pipeline;

fn main() -> e4ssl::Result<()> {
    common::init_logging();
    let work = common::work_dir("features");
    let store = common::prepared_store(&work)?;
    let csv = work.join("features.csv");
    let rows = pipeline::cmd_features(&store, &csv)?;
    println!("{rows} rows written to {}", csv.display());

    let names = feature_names();
    let table = read_features_csv(&csv)?;
    let first = &table[0];
    println!("segment {} ({})", first.segment_id, first.label.as_str());
    for (name, v) in names.iter().zip(&first.values) {
        println!("  {name:<24} {}", v.map_or("missing".into(), |v| format!("{v:.4}")));
    }
    Ok(())
}
