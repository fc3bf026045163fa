pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod discriminators;
pub mod evaluation;
pub mod error;
pub mod generators;
pub mod image;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod perturb;
pub mod resample;
pub mod trainer;

pub use error::{Error, Result};
pub use image::ImageTensor;
