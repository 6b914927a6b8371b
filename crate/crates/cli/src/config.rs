//! JSON configuration files. Unknown keys such as `_comment` are ignored.

use std::path::Path;

use anyhow::{Context, Result};
use objreg::joint_solver::{PairOptions, SolverConfig};
use objreg::matching::MatchConfig;
use objreg::posegraph::GraphConfig;
use objreg::synth::{OverlapBucket, SynthConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Settings for `register-pair` and `register-sequence`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub matching: MatchConfig,
    pub solver: SolverConfig,
    pub pair: PairOptions,
    pub graph: GraphConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.matching.validate().context("matching")?;
        self.solver.validate().context("solver")?;
        self.graph.validate().context("graph")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSuiteConfig {
    pub buckets: Vec<OverlapBucket>,
    pub n_per_bucket: usize,
}

/// Settings for `synth`: one scene, or a pair suite when `pair_suite` is set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthFile {
    pub scene: SynthConfig,
    pub pair_suite: Option<PairSuiteConfig>,
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
