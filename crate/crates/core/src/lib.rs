pub mod error;
pub mod graph;
pub mod micro;
pub mod rng;

pub use error::{Error, Result};
pub mod lifting;
pub mod coarse;
pub mod numerics;
pub mod rare_events;
pub mod oracle;
pub mod config;
