//! Flat experiment configuration. Parsing is strict: unknown keys are
//! fatal so ablation configs cannot silently misspell a switch.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::PopularityMode;
use crate::error::{Error, Result};
use crate::transformer::ArchDims;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its own named substream.
    pub seed: u64,

    // -- loss weights (overall objective) --
    pub lambda_item: f64,
    pub lambda_user: f64,
    pub lambda_kl: f64,

    // -- temperatures --
    /// Contrastive alignment temperature.
    pub tau: f64,
    /// Distribution-sharpening temperature for the mutual KL term.
    pub phi: f64,

    // -- scheduled semantic substitution --
    /// Probability of keeping the whole item's ground-truth tokens.
    pub p1: f64,
    /// Per-token keep probability when the item was selected for
    /// substitution.
    pub p2: f64,
    /// Top-q fusion width for substituted positions.
    pub fusion_q: usize,
    /// Teacher-forced initial prediction in the language view (free-running
    /// when false).
    pub ssg_teacher_forced: bool,

    // -- component toggles (ablation grid) --
    /// Dual-view training: language view, both generation losses, and the
    /// contrastive alignments. Off = plain ID-view backbone.
    pub use_language_view: bool,
    /// Semantic substitution + mutual KL during pre-training.
    pub ssg_enabled: bool,

    // -- retrieval --
    pub retrieve_z: usize,
    pub rerank_v: usize,

    // -- sequences and IDs --
    /// Maximum items per user sequence (m).
    pub max_seq_len: usize,
    /// Quantization levels per item ID (k).
    pub id_levels: usize,
    /// Centroids per level.
    pub codebook_size: usize,

    // -- architecture --
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub token_emb_dim: usize,
    /// Extractor output dimensionality (deterministic-hash extractor).
    pub text_embed_dim: usize,

    // -- optimizer --
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    /// Training examples drawn per user per epoch (0 = every prefix).
    pub prefixes_per_user: usize,

    // -- evaluation --
    pub beam_width: usize,
    pub popularity_bins: usize,
    /// "train-only" or "all".
    pub popularity_mode: String,

    // -- auxiliary sequential recommender (retrieval profiles) --
    pub collab_dim: usize,
    pub collab_layers: usize,
    pub collab_epochs: usize,
    pub collab_lr: f64,

    // -- synthetic corpus (synth-data stage) --
    pub synth_users: usize,
    pub synth_items: usize,
    pub synth_clusters: usize,
    pub synth_skew: f64,
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults: small enough to train in seconds on a CPU.
    /// `paper_scale` carries the published architecture instead.
    fn default() -> Self {
        Self {
            seed: 42,
            lambda_item: 0.5,
            lambda_user: 0.85,
            lambda_kl: 0.5,
            tau: 0.07,
            phi: 2.0,
            p1: 0.6,
            p2: 0.5,
            fusion_q: 5,
            ssg_teacher_forced: true,
            use_language_view: true,
            ssg_enabled: true,
            retrieve_z: 10,
            rerank_v: 5,
            max_seq_len: 20,
            id_levels: 3,
            codebook_size: 32,
            d_model: 32,
            n_heads: 2,
            ffn_dim: 64,
            enc_layers: 2,
            dec_layers: 2,
            token_emb_dim: 32,
            text_embed_dim: 48,
            learning_rate: 0.002,
            warmup_ratio: 0.01,
            weight_decay: 0.01,
            batch_size: 32,
            max_epochs: 60,
            patience: 20,
            finetune_epochs: 12,
            finetune_lr: 0.001,
            prefixes_per_user: 2,
            beam_width: 10,
            popularity_bins: 5,
            popularity_mode: "train-only".into(),
            collab_dim: 32,
            collab_layers: 2,
            collab_epochs: 30,
            collab_lr: 0.003,
            synth_users: 200,
            synth_items: 100,
            synth_clusters: 4,
            synth_skew: 1.0,
        }
    }
}

impl ExperimentConfig {
    /// Published architecture and optimizer settings (4 layers, 6 heads of
    /// 64, FFN 1024, token dim 128, batch 512). Expect workstation-scale
    /// runtimes.
    pub fn paper_scale() -> Self {
        Self {
            d_model: 384,
            n_heads: 6,
            ffn_dim: 1024,
            enc_layers: 4,
            dec_layers: 4,
            token_emb_dim: 128,
            codebook_size: 256,
            batch_size: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.phi <= 0.0 {
            return Err(Error::Config(format!("phi must be > 0, got {}", self.phi)));
        }
        for (name, p) in [("p1", self.p1), ("p2", self.p2)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.fusion_q == 0 {
            return Err(Error::Config("fusion_q must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.id_levels == 0 {
            return Err(Error::Config("id_levels must be >= 1".into()));
        }
        self.popularity_mode_parsed()?;
        Ok(())
    }

    pub fn popularity_mode_parsed(&self) -> Result<PopularityMode> {
        match self.popularity_mode.as_str() {
            "train-only" => Ok(PopularityMode::TrainOnly),
            "all" => Ok(PopularityMode::All),
            other => Err(Error::Config(format!(
                "popularity_mode must be \"train-only\" or \"all\", got {other:?}"
            ))),
        }
    }

    pub fn enc_dims(&self) -> ArchDims {
        ArchDims {
            d_model: self.d_model,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            n_layers: self.enc_layers,
        }
    }

    pub fn dec_dims(&self) -> ArchDims {
        ArchDims {
            d_model: self.d_model,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            n_layers: self.dec_layers,
        }
    }

    /// Canonical JSON serialization (struct field order is fixed).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        crate::util::sha256_hex(self.canonical_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::util::io_err(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.canonical_json() + "\n")
            .map_err(|e| crate::util::io_err(path, e))
    }
}
