pub mod cli;
pub mod config;
pub mod estimator;
pub mod ibd;
pub mod metrics;
pub mod model;
pub mod mpc;
pub mod personalization;
pub mod scenario;
