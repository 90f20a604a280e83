pub mod analytics;
pub mod config;
pub mod delay_model;
pub mod experiment;
pub mod metrics;
pub mod numeric;
pub mod schedulers;
pub mod sim;
