//! Run configuration: a single JSON document describing one training run,
//! with strict field checking, default expansion and a content hash for
//! reproducibility bookkeeping.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetSpec, SubsetSize};
use crate::error::{Error, Result};
use crate::model::{Method, NetworkConfig};
use crate::train::TrainConfig;

/// Batch size picked from the subset size when the config leaves it unset:
/// tiny subsets get small batches so there is more than one step per epoch.
pub fn default_batch_size(subset: SubsetSize) -> usize {
    match subset {
        SubsetSize::All => 128,
        SubsetSize::PerClass(m) if m <= 5 => 8,
        SubsetSize::PerClass(m) if m <= 20 => 16,
        SubsetSize::PerClass(m) if m <= 100 => 32,
        SubsetSize::PerClass(_) => 128,
    }
}

fn default_method() -> Method {
    Method::Cvs
}

fn default_subset() -> SubsetSize {
    SubsetSize::All
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    /// Held-out split; defaults to the dataset source with a `#test` suffix.
    #[serde(default)]
    pub test_source: Option<String>,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_subset")]
    pub subset: SubsetSize,
    #[serde(default)]
    pub seed: u64,
    /// Pixels strictly above this become foreground during binarization.
    #[serde(default)]
    pub binarize_threshold: f32,
    /// Overrides the subset-derived default when set.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("bad run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<RunConfig> {
        if !path.exists() {
            return Err(Error::MissingSource(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if let Some(b) = self.batch_size {
            if b == 0 {
                return Err(Error::config("batch size must be >= 1"));
            }
        }
        if !self.binarize_threshold.is_finite() {
            return Err(Error::config("binarize threshold must be finite"));
        }
        Ok(())
    }

    /// Fill every derived default so two configs that resolve identically
    /// hash identically: the run seed is copied into the training config and
    /// the batch size is fixed from the subset size when unset.
    pub fn resolved(&self) -> RunConfig {
        let mut out = self.clone();
        out.train.seed = self.seed;
        let batch = self.batch_size.unwrap_or_else(|| default_batch_size(self.subset));
        out.batch_size = Some(batch);
        out.train.batch_size = batch;
        if out.test_source.is_none() && !self.dataset.source.contains('#') {
            out.test_source = Some(format!("{}#test", self.dataset.source));
        }
        out
    }

    /// SHA-256 of the resolved config's canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let resolved = self.resolved();
        let json = serde_json::to_string(&resolved).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
