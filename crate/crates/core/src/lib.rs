pub mod admm;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod exact;
pub mod experiment;
pub mod io;
pub mod learning;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod relaxation;
pub mod rounding;
