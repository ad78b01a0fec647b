pub mod agents;
pub mod autodiff;
pub mod experiment;
pub mod rng;
pub mod sensors;
pub mod training;
pub mod particle_filter;
