pub mod audio;
pub mod data;
pub mod export;
pub mod mfcc;
pub mod models;
pub mod nn;
pub mod orchestrator;
pub mod protocol;
pub mod seed;
pub mod tensor;

pub use tensor::Tensor;
