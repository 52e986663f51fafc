pub mod config;
pub mod discriminator;
pub mod evo;
pub mod experiment;
pub mod generator;
pub mod grammar;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod train;
