pub mod alignloss;
pub mod astalign;
pub mod data;
pub mod error;
pub mod eyelayer;
pub mod metrics;
pub mod minilm;
pub mod numerics;
pub mod params;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
