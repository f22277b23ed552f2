//! Next-location prediction harness.
//!
//! Stay sequences are cut into history/context/target windows, rendered into
//! context-inclusive prompts, answered by a completion backend (or a
//! baseline), parsed into ranked place lists and scored with Acc@k, weighted
//! F1 and nDCG@k.

pub mod baselines;
pub mod gateway;
pub mod ingest;
pub mod metrics;
pub mod mobility;
pub mod parse;
pub mod prompt;
pub mod runner;
pub mod synthetic;

pub use mobility::{DayOfWeek, PlaceId, PredictionSample, Stay, TargetSlot, UserSequence, WindowConfig};
