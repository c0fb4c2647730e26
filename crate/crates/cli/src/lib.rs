//! Scenario runner: reads TOML/JSON scenarios, drives the simulator and
//! cost model, and writes JSON reports and CSV traces.

pub mod analysis;
pub mod checks;
pub mod compare;
pub mod error;
pub mod scenario;

pub use analysis::{analyze, write_outputs, Analysis, Report};
pub use error::{CliError, Result};
pub use scenario::{load_resolved, Overrides, Resolved, Scenario};
