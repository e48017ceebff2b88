pub mod e4mer;
pub mod error;
pub mod features;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
pub mod pretext;
pub mod segmentation;
pub mod store;
pub mod synth;
pub mod training;
pub mod wear_state;

pub use error::{Error, Result};
