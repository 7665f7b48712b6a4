//! Experiment configuration.
//!
//! A run is described by one TOML file with `[algorithm]`, `[federation]`,
//! `[data]`, and optional `[model]` / `[output]` tables. Grid sweeps add a
//! second file with a `[sweep]` table. Defaults follow the standard recipe
//! for this family of experiments: three local epochs, personal rate 0.1,
//! global rate 0.001, growth fraction 0.05 per round.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{FedError, Result};
use crate::local_update::{GrowthConfig, LocalConfig};
use crate::mask::SelectionRule;
use crate::model::{Activation, LayerSpec};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlgorithmSpec {
    /// Mask-growing personalization: alternating local training plus
    /// displacement-based parameter selection.
    Fedselect,
    /// Plain federated averaging of the full model.
    Fedavg,
    /// Federated averaging followed by local fine-tuning at the end.
    FedavgFt { ft_epochs: usize },
    /// No communication at all; every client trains alone.
    LocalOnly,
    /// A constant, hand-picked personalized block shared by all clients.
    FixedPartition {
        #[serde(default)]
        layer: Option<usize>,
        #[serde(default)]
        mask: Option<String>,
    },
    /// Mask growth that promotes the least-moving parameters instead.
    PersonalizeLeast,
    /// A constant seeded random personalized block shared by all clients.
    RandomPartition { fraction: f64 },
}

impl AlgorithmSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmSpec::Fedselect => "fedselect",
            AlgorithmSpec::Fedavg => "fedavg",
            AlgorithmSpec::FedavgFt { .. } => "fedavg_ft",
            AlgorithmSpec::LocalOnly => "local_only",
            AlgorithmSpec::FixedPartition { .. } => "fixed_partition",
            AlgorithmSpec::PersonalizeLeast => "personalize_least",
            AlgorithmSpec::RandomPartition { .. } => "random_partition",
        }
    }
}

fn default_local_epochs() -> usize {
    3
}
fn default_gamma_v() -> f64 {
    0.1
}
fn default_gamma_u() -> f64 {
    0.001
}
fn default_p() -> f64 {
    0.05
}
fn default_alpha() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub n_clients: usize,
    /// Communication rounds.
    pub rounds: usize,
    pub master_seed: u64,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    /// Omitted means full-batch training.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_gamma_v")]
    pub gamma_v: f64,
    #[serde(default = "default_gamma_u")]
    pub gamma_u: f64,
    /// Fraction of the remaining global block promoted per growth step.
    #[serde(default = "default_p")]
    pub p: f64,
    /// Personalized fraction at which mask growth stops.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub momentum: f64,
    /// Train clients concurrently. Results are identical either way.
    #[serde(default = "default_true")]
    pub parallel: bool,
    /// Write full parameter snapshots every this many rounds; 0 disables.
    #[serde(default)]
    pub snapshot_interval: usize,
}

fn default_classes() -> usize {
    10
}
fn default_input_dim() -> usize {
    8
}
fn default_samples_per_class() -> usize {
    300
}
fn default_spread() -> f64 {
    1.0
}
fn default_shard() -> usize {
    2
}
fn default_test_size() -> usize {
    100
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Seeded Gaussian blobs, one per class.
    Blobs {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_input_dim")]
        input_dim: usize,
        #[serde(default = "default_samples_per_class")]
        samples_per_class: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default = "default_shard")]
        shard: usize,
        /// Training samples per client.
        train_size: usize,
        #[serde(default = "default_test_size")]
        test_size: usize,
        #[serde(default)]
        feature_shift: f64,
    },
    /// CSV file with header `f0,...,f{m-1},label`.
    Csv {
        path: PathBuf,
        #[serde(default = "default_shard")]
        shard: usize,
        train_size: usize,
        #[serde(default = "default_test_size")]
        test_size: usize,
        #[serde(default)]
        feature_shift: f64,
    },
}

impl DataConfig {
    pub fn shard(&self) -> usize {
        match self {
            DataConfig::Blobs { shard, .. } | DataConfig::Csv { shard, .. } => *shard,
        }
    }

    pub fn train_size(&self) -> usize {
        match self {
            DataConfig::Blobs { train_size, .. } | DataConfig::Csv { train_size, .. } => {
                *train_size
            }
        }
    }

    pub fn test_size(&self) -> usize {
        match self {
            DataConfig::Blobs { test_size, .. } | DataConfig::Csv { test_size, .. } => *test_size,
        }
    }

    pub fn feature_shift(&self) -> f64 {
        match self {
            DataConfig::Blobs { feature_shift, .. } | DataConfig::Csv { feature_shift, .. } => {
                *feature_shift
            }
        }
    }

    pub fn set_train_size(&mut self, value: usize) {
        match self {
            DataConfig::Blobs { train_size, .. } | DataConfig::Csv { train_size, .. } => {
                *train_size = value
            }
        }
    }
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: default_hidden(),
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: default_out_dir(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FLConfig {
    pub algorithm: AlgorithmSpec,
    pub federation: FederationConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl FLConfig {
    pub fn from_toml_str(text: &str) -> Result<FLConfig> {
        let cfg: FLConfig =
            toml::from_str(text).map_err(|e| FedError::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<FLConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FedError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fed = &self.federation;
        if fed.n_clients == 0 {
            return Err(FedError::Config("n_clients must be positive".into()));
        }
        if !(fed.p > 0.0 && fed.p <= 1.0) {
            return Err(FedError::Config("p must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&fed.alpha) {
            return Err(FedError::Config("alpha must lie in [0, 1]".into()));
        }
        if fed.gamma_v < 0.0 || fed.gamma_u < 0.0 {
            return Err(FedError::Config(
                "learning rates must be nonnegative".into(),
            ));
        }
        if !(0.0..1.0).contains(&fed.momentum) {
            return Err(FedError::Config("momentum must lie in [0, 1)".into()));
        }
        if fed.local_epochs == 0 {
            return Err(FedError::Config("local_epochs must be positive".into()));
        }
        if fed.batch_size == Some(0) {
            return Err(FedError::Config(
                "batch_size must be positive when set".into(),
            ));
        }
        if let DataConfig::Blobs {
            classes,
            shard,
            input_dim,
            samples_per_class,
            spread,
            ..
        } = &self.data
        {
            if *classes < 2 {
                return Err(FedError::Config("blobs need at least two classes".into()));
            }
            if *shard == 0 || shard > classes {
                return Err(FedError::Config(format!(
                    "shard must lie in 1..={classes}, got {shard}"
                )));
            }
            if *input_dim == 0 || *samples_per_class == 0 {
                return Err(FedError::Config("blob dimensions must be positive".into()));
            }
            if *spread < 0.0 {
                return Err(FedError::Config("blob spread must be nonnegative".into()));
            }
        }
        if self.data.train_size() == 0 || self.data.test_size() == 0 {
            return Err(FedError::Config(
                "train_size and test_size must be positive".into(),
            ));
        }
        if self.model.hidden.contains(&0) {
            return Err(FedError::Config(
                "hidden layer widths must be positive".into(),
            ));
        }
        match &self.algorithm {
            AlgorithmSpec::FixedPartition { layer, mask } => {
                if layer.is_some() == mask.is_some() {
                    return Err(FedError::Config(
                        "fixed_partition needs exactly one of `layer` or `mask`".into(),
                    ));
                }
            }
            AlgorithmSpec::RandomPartition { fraction } if !(0.0..=1.0).contains(fraction) => {
                return Err(FedError::Config("fraction must lie in [0, 1]".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// Layer specs for the classifier: hidden relu layers per `[model]`,
    /// identity logits on top.
    pub fn arch(&self, input_dim: usize, classes: usize) -> Vec<LayerSpec> {
        let mut arch = Vec::with_capacity(self.model.hidden.len() + 1);
        let mut prev = input_dim;
        for &width in &self.model.hidden {
            arch.push(LayerSpec {
                input_dim: prev,
                output_dim: width,
                activation: Activation::Relu,
            });
            prev = width;
        }
        arch.push(LayerSpec {
            input_dim: prev,
            output_dim: classes,
            activation: Activation::Identity,
        });
        arch
    }

    /// Effective batch size once the client's training set size is known.
    pub fn resolved_batch_size(&self, train_len: usize) -> usize {
        self.federation
            .batch_size
            .unwrap_or(train_len)
            .min(train_len)
    }

    /// Local training settings for this run. Growth is only active for the
    /// two selection-based algorithms.
    pub fn local_config(&self, train_len: usize) -> LocalConfig {
        let batch_size = self.resolved_batch_size(train_len);
        let growth = match &self.algorithm {
            AlgorithmSpec::Fedselect => Some(GrowthConfig {
                p: self.federation.p,
                alpha: self.federation.alpha,
                rule: SelectionRule::LargestDelta,
            }),
            AlgorithmSpec::PersonalizeLeast => Some(GrowthConfig {
                p: self.federation.p,
                alpha: self.federation.alpha,
                rule: SelectionRule::SmallestDelta,
            }),
            _ => None,
        };
        LocalConfig {
            epochs: self.federation.local_epochs,
            batch_size,
            tau: crate::data::steps_per_epoch(train_len, batch_size),
            gamma_v: self.federation.gamma_v,
            gamma_u: self.federation.gamma_u,
            momentum: self.federation.momentum,
            growth,
        }
    }
}

/// Axes of a grid sweep. Every present axis is crossed with every other;
/// absent axes keep the base config's value.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub p: Option<Vec<f64>>,
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(default)]
    pub train_size: Option<Vec<usize>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    sweep: SweepSpec,
}

impl SweepSpec {
    pub fn from_toml_str(text: &str) -> Result<SweepSpec> {
        let file: SweepFile =
            toml::from_str(text).map_err(|e| FedError::Config(format!("bad sweep: {e}")))?;
        let spec = file.sweep;
        if spec.p.as_deref().is_some_and(<[f64]>::is_empty)
            || spec.alpha.as_deref().is_some_and(<[f64]>::is_empty)
            || spec.train_size.as_deref().is_some_and(<[usize]>::is_empty)
        {
            return Err(FedError::Config(
                "sweep axes must not be empty lists".into(),
            ));
        }
        if spec.p.is_none() && spec.alpha.is_none() && spec.train_size.is_none() {
            return Err(FedError::Config(
                "sweep must define at least one axis".into(),
            ));
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<SweepSpec> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FedError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Cartesian product of the axes, in p-major order. Each cell yields a
    /// config derived from `base`.
    pub fn cells(&self, base: &FLConfig) -> Vec<GridCell> {
        let ps = self.p.clone().unwrap_or_else(|| vec![base.federation.p]);
        let alphas = self
            .alpha
            .clone()
            .unwrap_or_else(|| vec![base.federation.alpha]);
        let sizes = self
            .train_size
            .clone()
            .unwrap_or_else(|| vec![base.data.train_size()]);
        let mut cells = Vec::with_capacity(ps.len() * alphas.len() * sizes.len());
        for &p in &ps {
            for &alpha in &alphas {
                for &train_size in &sizes {
                    cells.push(GridCell {
                        p,
                        alpha,
                        train_size,
                    });
                }
            }
        }
        cells
    }
}

/// One point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub p: f64,
    pub alpha: f64,
    pub train_size: usize,
}

impl GridCell {
    /// Base config with this cell's values and its own derived seed.
    pub fn apply(&self, base: &FLConfig, cell_index: usize) -> FLConfig {
        let mut cfg = base.clone();
        cfg.federation.p = self.p;
        cfg.federation.alpha = self.alpha;
        cfg.data.set_train_size(self.train_size);
        cfg.federation.master_seed = crate::seed::derive_seed(
            base.federation.master_seed,
            crate::seed::STREAM_GRID_BASE + cell_index as u64,
        );
        cfg
    }
}
