//! Off-body and sleep detection on one synthetic recording.
//!
//! ```text
//! cargo run --release --example wear_state
//! ```

use e4ssl::ingest::{align, ChannelKind};
use e4ssl::synth::{synthesize, SynthSpec};
use e4ssl::wear_state::{detect_offbody, detect_sleep, label_recording, summarize_hours, WearState};

fn main() -> e4ssl::Result<()> {
    let spec = SynthSpec::parse("subjects_per_class=1\nduration_s=3600\nunlabelled=\noffbody=600:600\nsleep=2400:420\n")?;
    let (_, rec) = synthesize(&spec, std::path::Path::new(".")).into_iter().next().expect("one recording");
    let rec = align(&rec)?;

    let offbody = detect_offbody(rec.channel(ChannelKind::Eda)?, rec.channel(ChannelKind::Temp)?);
    let sleep = detect_sleep([rec.channel(ChannelKind::AccX)?, rec.channel(ChannelKind::AccY)?, rec.channel(ChannelKind::AccZ)?]);
    println!(
        "{}: {} off-body seconds, {} still 5 s epochs",
        rec.id,
        offbody.iter().filter(|&&b| b).count(),
        sleep.iter().filter(|&&b| b).count()
    );

    let timeline = label_recording(&rec)?;
    for state in [WearState::OffBody, WearState::Sleep, WearState::Wake] {
        for (start, len) in timeline.runs_of(state) {
            println!("{state:?} from {start} s for {len} s");
        }
    }
    let h = summarize_hours(&timeline);
    println!("hours: off-body {:.3}, sleep {:.3}, wake {:.3}", h.offbody_h, h.sleep_h, h.wake_h);
    Ok(())
}
