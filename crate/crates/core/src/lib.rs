//! Detection of small bright anomalies in grayscale frames by splitting
//! overlapping patches into a dictionary-coded background and a sparse
//! outlier component.

pub mod baselines;
pub mod detection;
pub mod dictionary;
pub mod evaluation;
pub mod imaging;
pub mod points;
pub mod robust_coding;
pub mod synth;

mod fsutil;
