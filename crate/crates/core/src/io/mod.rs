//! File formats: scenario configs, trajectory CSVs, policy files and
//! metric tables.

pub mod config;
pub mod policyfile;
pub mod tables;
pub mod trajfile;

pub use config::{Scenario, ScenarioConfig};
