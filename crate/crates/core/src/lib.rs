pub mod cli;
pub mod datagen;
pub mod dsp;
pub mod metrics;
pub mod tensor;
pub mod perturb;
pub mod report;
pub mod robustness;
pub mod separator;
