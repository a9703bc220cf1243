pub mod decoder;
pub mod encoder;
pub mod error;
pub mod io;
pub mod nn;
pub mod tensor;
pub mod data;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod phantom;
pub mod rng;
pub mod config;
pub mod train;
pub mod verify;
