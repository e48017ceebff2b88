//! Shared setup for the examples: a small synthetic dataset and a model
//! small enough to train in seconds on one core.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use e4ssl::pipeline::{self, PipelineConfig};
use e4ssl::synth::SynthSpec;
use e4ssl::training::config::parse_key_values;

pub const SMALL_CONFIG: &str = "
omega=32
delta=16
num_filters=4
d_model=16
num_heads=2
num_blocks=1
mlp_dim=32
batch_size=64
max_epochs=8
patience_epochs=3
";

pub fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
}

/// First CLI argument, or a fixed directory under the system temp dir.
pub fn work_dir(name: &str) -> PathBuf {
    std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join(format!("e4ssl_{name}")))
}

pub fn small_config() -> e4ssl::Result<PipelineConfig> {
    PipelineConfig::from_key_values(&parse_key_values(SMALL_CONFIG)?)
}

pub fn small_spec() -> e4ssl::Result<SynthSpec> {
    SynthSpec::parse("subjects_per_class=4\nduration_s=1800\nunlabelled=unl_a:3,unl_b:3\noffbody=200:300\nsleep=700:400\n")
}

/// Synthesizes and preprocesses into `<work>/raw` and `<work>/store`,
/// reusing an existing store.
pub fn prepared_store(work: &Path) -> e4ssl::Result<PathBuf> {
    let store = work.join("store");
    if !store.join("manifest.tsv").exists() {
        let manifest = pipeline::cmd_synth(&small_spec()?, &work.join("raw"))?;
        pipeline::cmd_preprocess(&manifest, &store, &small_config()?)?;
    }
    Ok(store)
}
