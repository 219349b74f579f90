use std::collections::BTreeSet;
use std::net::IpAddr;
use std::path::Path;

use ipnet::IpNet;
use serde::{Deserialize, Serialize};

use super::split::{LabelRule, Period, SplitSpec};
use crate::error::{Error, Result};

/// Per-dataset facts the operator fills in from the dataset's documentation:
/// which address ranges are internal, which hosts are infected, and which
/// capture periods feed training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario_name: String,
    pub internal_subnets: Vec<IpNet>,
    #[serde(default)]
    pub infected_hosts: BTreeSet<IpAddr>,
    #[serde(default)]
    pub train_periods: Vec<Period>,
    #[serde(default = "default_adversary_fraction")]
    pub adversary_fraction: f64,
    #[serde(default = "default_window")]
    pub window_seconds: f64,
}

fn default_adversary_fraction() -> f64 {
    0.15
}

fn default_window() -> f64 {
    super::WINDOW_SECONDS
}

impl ScenarioConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ScenarioConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.internal_subnets.is_empty() {
            return Err(Error::Config("internal_subnets must not be empty".into()));
        }
        if !(self.window_seconds > 0.0) {
            return Err(Error::Config("window_seconds must be positive".into()));
        }
        Ok(())
    }

    pub fn label_rule(&self) -> LabelRule {
        LabelRule {
            infected_hosts: self.infected_hosts.iter().copied().collect(),
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_periods: self.train_periods.clone(),
            adversary_fraction: self.adversary_fraction,
            window_seconds: self.window_seconds,
        }
    }
}
