pub mod engine;
pub mod event;
pub mod metrics;
pub mod rng;
pub mod topology;

pub use engine::run;
