use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::{LabelMode, LabelPolicy, TrainConfig, DEFAULT_NUM_BATCHES, DEFAULT_P_L};
use crate::embedding::{EmbeddingConfig, Pooling, DEFAULT_BATCH_SIZE, DEFAULT_DIM};
use crate::error::{Error, Result};
use crate::log_ingest::DEFAULT_RETENTION_DAYS;
use crate::pattern_miner::{MineConfig, DEFAULT_MAX_ORD, DEFAULT_THETA};

/// How records are assigned to business groups before mining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    /// Classifier prediction on `[Z || X]`.
    #[default]
    Predicted,
    /// The record's `group_label`.
    Label,
    /// Everything in one group.
    None,
}

impl FromStr for GroupBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(GroupBy::Predicted),
            "label" => Ok(GroupBy::Label),
            "none" => Ok(GroupBy::None),
            other => Err(Error::Config(format!(
                "unknown group_by {other:?}, expected predicted, label or none"
            ))),
        }
    }
}

impl fmt::Display for GroupBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupBy::Predicted => "predicted",
            GroupBy::Label => "label",
            GroupBy::None => "none",
        })
    }
}

/// Every tunable of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub theta: f64,
    pub max_ord: usize,
    pub min_count: u64,
    pub pooling: Pooling,
    pub batch_size: usize,
    pub dim: usize,
    pub p_l: f64,
    pub label_mode: LabelMode,
    pub retention_days: u32,
    pub num_batches: usize,
    pub seed: u64,
    pub group_by: GroupBy,
    /// Base URL of an external embedding service; the built-in embedder is
    /// used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder_url: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            theta: DEFAULT_THETA,
            max_ord: DEFAULT_MAX_ORD,
            min_count: 1,
            pooling: Pooling::Max,
            batch_size: DEFAULT_BATCH_SIZE,
            dim: DEFAULT_DIM,
            p_l: DEFAULT_P_L,
            label_mode: LabelMode::RandomSample,
            retention_days: DEFAULT_RETENTION_DAYS,
            num_batches: DEFAULT_NUM_BATCHES,
            seed: 0,
            group_by: GroupBy::Predicted,
            embedder_url: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl PipelineConfig {
    /// Parse `key=value` lines on top of the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys are an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", n + 1))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "theta" => self.theta = parse(key, value)?,
            "max_ord" => self.max_ord = parse(key, value)?,
            "min_count" => self.min_count = parse(key, value)?,
            "pooling" => self.pooling = value.parse()?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "p_l" | "P_L" | "pl" => self.p_l = parse(key, value)?,
            "label_mode" | "mode" => self.label_mode = value.parse()?,
            "retention_days" => self.retention_days = parse(key, value)?,
            "num_batches" | "batches" => self.num_batches = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "group_by" => self.group_by = value.parse()?,
            "embedder_url" => self.embedder_url = (!value.is_empty()).then(|| value.to_string()),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Config(format!(
                "theta must be in (0, 1], got {}",
                self.theta
            )));
        }
        if self.min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        if self.retention_days == 0 {
            return Err(Error::Config("retention_days must be at least 1".into()));
        }
        if self.num_batches == 0 {
            return Err(Error::Config("num_batches must be at least 1".into()));
        }
        self.embedding().validate()?;
        LabelPolicy::new(self.label_mode, self.p_l, self.seed)?;
        Ok(())
    }

    pub fn embedding(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            dim: self.dim,
            batch_size: self.batch_size,
            pooling: self.pooling,
            seed: self.seed,
        }
    }

    pub fn mining(&self) -> MineConfig {
        MineConfig {
            theta: self.theta,
            max_ord: self.max_ord,
            min_count: self.min_count,
            parallel: false,
        }
    }

    pub fn label_policy(&self) -> LabelPolicy {
        LabelPolicy {
            mode: self.label_mode,
            p_l: self.p_l,
            seed: self.seed,
        }
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            num_batches: self.num_batches,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = PipelineConfig::parse("").unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(
            (
                c.theta,
                c.max_ord,
                c.dim,
                c.batch_size,
                c.p_l,
                c.num_batches
            ),
            (0.77, 1, 64, 512, 0.01, 10)
        );
        assert_eq!(c.retention_days, 3);

        let text = "# run settings\ntheta = 0.7\nmax_ord=2\npooling=mean\nP_L=0.5\nmode=hybrid\ngroup_by=label  # inline\nseed=42\n";
        let c = PipelineConfig::parse(text).unwrap();
        assert_eq!(c.theta, 0.7);
        assert_eq!(c.max_ord, 2);
        assert_eq!(c.pooling, Pooling::Mean);
        assert_eq!(c.p_l, 0.5);
        assert_eq!(c.label_mode, LabelMode::Hybrid);
        assert_eq!(c.group_by, GroupBy::Label);
        assert_eq!(c.seed, 42);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "theta=0",
            "theta=1.5",
            "dim=0",
            "p_l=2",
            "nonsense=1",
            "theta",
            "max_ord=-1",
            "pooling=sum",
        ] {
            assert!(
                matches!(PipelineConfig::parse(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }
}
