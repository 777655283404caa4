//! Command-line front end of the simulator: JSON experiment configs, named
//! presets, CSV reports.

pub mod config;
pub mod error;
pub mod presets;
pub mod report;
pub mod runner;

use std::path::Path;

pub use config::{parse_config, parse_config_str, DatasetConfig, ExperimentConfig};
pub use error::{HarnessError, Result};
pub use presets::{preset, presets, Preset};

/// Reads `arg` as a config file if one exists at that path, otherwise as a
/// preset name.
pub fn load_experiment(arg: &str) -> Result<ExperimentConfig> {
    let path = Path::new(arg);
    if path.is_file() {
        return parse_config(path);
    }
    match preset(arg) {
        Some(p) => p.config.resolve(),
        None => Err(HarnessError::UnknownPreset(arg.to_string())),
    }
}
