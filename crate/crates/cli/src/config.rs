//! Run configuration: one TOML tree with a section per subcommand.
//! Command-line flags override file values; the resolved tree is written
//! back into every run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use stackpool::bench::default_pools;
use stackpool::data::{SceneParams, SplitName};
use stackpool::networks::Architecture;
use stackpool::tensor::DType;
use stackpool::training::AdamConfig;
use stackpool::PoolSpec;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub verify: VerifySection,
    pub bench: BenchSection,
    pub invariance: InvarianceSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub scenes: usize,
    /// Scenes held out as the test split; the rest are split 9:1 into
    /// train and validation.
    pub test: usize,
    #[serde(flatten)]
    pub scene: SceneParams,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            scenes: 300,
            test: 100,
            scene: SceneParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub dataset: Option<PathBuf>,
    pub net: Architecture,
    pub pool: PoolSpec,
    /// Half-size patches cropped from each training image; 0 trains on
    /// whole images.
    pub patches: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub validate_every: usize,
    pub output_relu: bool,
    pub adam: AdamConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            dataset: None,
            net: Architecture::BaseS,
            pool: PoolSpec::vanilla(2, 2).expect("valid"),
            patches: 9,
            epochs: 500,
            batch_size: 1,
            validate_every: 2,
            output_relu: false,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub split: SplitName,
    pub buckets: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            checkpoint: None,
            dataset: None,
            split: SplitName::Test,
            buckets: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    /// Multi-kernel specs (stacked specs are mapped back to their
    /// multi-kernel form).
    pub pools: Vec<PoolSpec>,
    pub trials: usize,
    pub max_extent: usize,
    pub max_channels: usize,
    pub grad_check: bool,
    pub grad_net: Architecture,
    pub grad_extent: usize,
    pub grad_per_tensor: usize,
    pub grad_tolerance: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            pools: vec![
                PoolSpec::multi_kernel(&[2, 4], 2).expect("valid"),
                PoolSpec::multi_kernel(&[2, 4, 8], 2).expect("valid"),
                PoolSpec::multi_kernel(&[2, 4, 8, 16], 2).expect("valid"),
            ],
            trials: 100,
            max_extent: 64,
            max_channels: 4,
            grad_check: false,
            grad_net: Architecture::BaseS,
            grad_extent: 32,
            grad_per_tensor: 24,
            grad_tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub reps: usize,
    pub warmups: usize,
    pub layer_extent: usize,
    pub net: Architecture,
    pub net_extent: usize,
    pub dtype: DType,
    pub pools: Vec<PoolSpec>,
    pub baseline: Option<PathBuf>,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            reps: 40,
            warmups: 8,
            layer_extent: 256,
            net: Architecture::Deep,
            net_extent: 64,
            dtype: DType::F32,
            pools: default_pools(),
            baseline: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvarianceSection {
    pub vanilla: Option<PathBuf>,
    pub stacked: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub split: SplitName,
    pub beta: f64,
    pub threshold: f64,
}

impl Default for InvarianceSection {
    fn default() -> Self {
        InvarianceSection {
            vanilla: None,
            stacked: None,
            dataset: None,
            split: SplitName::Test,
            beta: 2.0,
            threshold: 2.0,
        }
    }
}

/// Reads a config file. A run manifest is accepted too: its `[config]`
/// table holds the resolved configuration of that run.
pub fn load(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut value: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let tree = match value.remove("config") {
        Some(toml::Value::Table(t)) if value.contains_key("command") => t,
        Some(other) => {
            value.insert("config".into(), other);
            value
        }
        None => value,
    };
    RunConfig::deserialize(tree).with_context(|| format!("invalid config {}", path.display()))
}

pub fn to_toml(config: &RunConfig) -> Result<toml::Table> {
    Ok(toml::Table::try_from(config)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 3\n[train]\npool = \"stacked:2,2,3:s2\"\nepochs = 4\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.pool.to_string(), "stacked:2,2,3:s2");
        assert_eq!(cfg.train.batch_size, 1);
        assert_eq!(cfg.data.scenes, 300);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nepoch = 4\n").is_err());
    }
}
