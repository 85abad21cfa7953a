pub mod autodiff;
pub mod data;
pub mod structure;
pub mod forecaster;
pub mod config;
pub mod model;
pub mod trainer;
pub mod evaluator;
pub mod synth;
