//! Experiment directory layout and per-stage hash stamps.
//!
//! Every stage stamps its completion with the resolved config hash;
//! re-running a completed stage with an unchanged hash is a no-op unless
//! forced, and downstream stages refuse to run over missing or stale
//! upstream artifacts.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub struct ExperimentDir {
    pub root: PathBuf,
}

#[derive(Debug, PartialEq, Eq, Clone, Copy)]
pub enum StampState {
    UpToDate,
    Stale,
    Missing,
}

impl ExperimentDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in [
            "corpus",
            "embeddings",
            "ids",
            "checkpoints",
            "retrieval",
            "logs",
            "reports",
            "stamps",
        ] {
            std::fs::create_dir_all(root.join(sub))
                .with_context(|| format!("creating {}", root.join(sub).display()))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn stamp_path(&self, stage: &str) -> PathBuf {
        self.root.join("stamps").join(format!("{stage}.json"))
    }

    pub fn stamp_state(&self, stage: &str, config_hash: &str) -> StampState {
        let path = self.stamp_path(stage);
        let Ok(text) = std::fs::read_to_string(&path) else {
            return StampState::Missing;
        };
        let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) else {
            return StampState::Stale;
        };
        if v["config_hash"].as_str() == Some(config_hash) {
            StampState::UpToDate
        } else {
            StampState::Stale
        }
    }

    pub fn write_stamp(&self, stage: &str, config_hash: &str) -> Result<()> {
        let doc = serde_json::json!({ "stage": stage, "config_hash": config_hash });
        std::fs::write(self.stamp_path(stage), doc.to_string())
            .with_context(|| format!("writing stamp for {stage}"))?;
        Ok(())
    }

    /// Fail with a message that names the stage the user has to run.
    pub fn require(&self, stage: &str, config_hash: &str) -> Result<()> {
        match self.stamp_state(stage, config_hash) {
            StampState::UpToDate => Ok(()),
            StampState::Missing => {
                bail!("missing upstream artifact: run `{stage}` first")
            }
            StampState::Stale => {
                bail!("upstream artifact from `{stage}` was built with a different config: re-run `{stage}`")
            }
        }
    }

    /// True when the stage is already done for this config (skip unless
    /// --force).
    pub fn up_to_date(&self, stage: &str, config_hash: &str, force: bool) -> bool {
        !force && self.stamp_state(stage, config_hash) == StampState::UpToDate
    }
}
