pub mod market;
pub mod money;
pub mod microgrid;
pub mod rng;
pub mod scenario;
pub mod env;
pub mod marl;
pub mod metrics;
pub mod policy;
pub mod config;
pub mod sim;
