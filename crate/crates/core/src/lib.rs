pub mod data;
pub mod experiment;
pub mod features;
pub mod graph;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rescaler;
pub mod rng;
pub mod trainer;
