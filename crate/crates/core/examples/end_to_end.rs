//! Synthetic end-to-end run: supervised baseline, masked pretraining with a
//! linear readout, and a readout on a frozen random encoder.
//!
//! ```text
//! cargo run --release --example end_to_end [work_dir]
//! ```

use std::time::Instant;

use e4ssl::e4mer::{E4mer, HeadKind};
use e4ssl::pipeline::{self, PipelineConfig, PretextTask, StoreData, TargetMode};
use e4ssl::segmentation::Split;
use e4ssl::synth::SynthSpec;
use e4ssl::training::config::parse_key_values;
use e4ssl::training::{linear_readout, stream_rng, Preset};

const CONFIG: &str = "
omega=32
delta=16
num_filters=8
d_model=32
num_heads=4
num_blocks=1
mlp_dim=64
max_epochs=25
patience_epochs=4
batch_size=64
";

fn main() -> e4ssl::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let work = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("e4ssl_e2e"));
    let cfg = PipelineConfig::from_key_values(&parse_key_values(CONFIG)?)?;

    let t = Instant::now();
    let manifest = pipeline::cmd_synth(&SynthSpec::default(), &work.join("raw"))?;
    pipeline::cmd_preprocess(&manifest, &work.join("store"), &cfg)?;
    let data = StoreData::load(&work.join("store"))?;
    println!("data ready in {:.1}s, {} segments", t.elapsed().as_secs_f64(), data.segments.len());

    let t = Instant::now();
    let (sl, _) = pipeline::train_target(&data, TargetMode::Supervised, None, None, &cfg)?;
    let m = pipeline::evaluate_model(&sl, &data)?;
    println!("supervised: test accuracy {:.4} in {:.1}s", m.segment.accuracy, t.elapsed().as_secs_f64());

    let t = Instant::now();
    let (mp, report) = pipeline::pretrain_on(
        &data,
        &data.ssl_examples(Split::Train),
        &data.ssl_examples(Split::Val),
        PretextTask::Masked,
        Preset::Mp,
        &cfg,
    )?;
    println!("pretraining: best val rmse {:.4} in {:.1}s", report.best_criterion, t.elapsed().as_secs_f64());
    let (ro, _) = pipeline::train_target(&data, TargetMode::Readout, Some(&mp), None, &cfg)?;
    let ssl = pipeline::evaluate_model(&ro, &data)?.segment.accuracy;

    let mc = cfg.model_config(&Preset::Mp.model_config().expect("mp"), 32, data.rates()?)?;
    let random = E4mer::new(mc, HeadKind::Reconstruction, &mut stream_rng(cfg.seed, "random-encoder", &[]))?;
    let tc = cfg.train_config(Preset::MpReadout)?;
    let train = data.target_examples(Split::Train);
    let val = data.target_examples(Split::Val);
    let (rr, _) = linear_readout(&random, &train, &val, &tc)?;
    let rnd = pipeline::evaluate_model(&rr, &data)?.segment.accuracy;
    println!("readout: pretrained {ssl:.4}, random encoder {rnd:.4}");
    Ok(())
}
