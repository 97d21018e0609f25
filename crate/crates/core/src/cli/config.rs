use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kf::LossWeights;
use crate::train::{AdamWConfig, FuseInput, ModelConfig};

/// Every tunable of a run. Files use these keys verbatim (flat JSON);
/// `C` and `M` are accepted as aliases of `classes` and `batch_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub d_z: usize,
    pub d_p: usize,
    pub d_h: usize,
    #[serde(alias = "C")]
    pub classes: usize,
    #[serde(alias = "M")]
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub tau: f64,
    pub fe_layers: usize,
    pub fe_heads: usize,
    pub pos_emb: bool,
    pub max_seq_len: usize,
    pub fuse_input: FuseInput,
    pub ae_init_scale: f64,
    /// Optimizer steps; when absent, `epochs` full passes are run.
    pub steps: Option<u64>,
    pub epochs: u64,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Evaluation worker threads.
    pub eval_threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let m = ModelConfig::default();
        Self {
            seed: 0,
            d_z: m.d_z,
            d_p: m.d_p,
            d_h: m.d_h,
            classes: m.classes,
            batch_size: 4,
            lr: 1e-5,
            weight_decay: AdamWConfig::default().weight_decay,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            delta: w.delta,
            tau: w.tau,
            fe_layers: m.fe_layers,
            fe_heads: m.fe_heads,
            pos_emb: m.pos_emb,
            max_seq_len: m.max_seq_len,
            fuse_input: m.fuse_input,
            ae_init_scale: m.ae_init_scale,
            steps: None,
            epochs: 1,
            train_data: None,
            val_data: None,
            out_dir: PathBuf::from("runs/default"),
            eval_threads: 1,
        }
    }
}

impl RunConfig {
    /// Small dimensions used by `gradcheck` before file and flag overrides.
    pub fn gradcheck_defaults() -> Self {
        Self {
            d_z: 8,
            d_p: 16,
            d_h: 16,
            batch_size: 2,
            fe_heads: 2,
            ae_init_scale: 0.3,
            ..Self::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d_z: self.d_z,
            d_p: self.d_p,
            d_h: self.d_h,
            classes: self.classes,
            fe_layers: self.fe_layers,
            fe_heads: self.fe_heads,
            pos_emb: self.pos_emb,
            max_seq_len: self.max_seq_len,
            fuse_input: self.fuse_input,
            ae_init_scale: self.ae_init_scale,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            delta: self.delta,
            tau: self.tau,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        for (k, v) in [("alpha", w.alpha), ("beta", w.beta), ("gamma", w.gamma), ("delta", w.delta)] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{k} must be finite, got {v}")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size (M) must be at least 1".into()));
        }
        if self.eval_threads == 0 {
            return Err(Error::Config("eval_threads must be at least 1".into()));
        }
        self.model().validate()?;
        self.optimizer().validate()
    }
}

/// Command-line overrides; each flag replaces the matching config key.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// Flat JSON file with run settings; flags given here take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for initialization, batching and synthetic data.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for logs, checkpoints and metrics.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Feature width of both modalities.
    #[arg(long)]
    pub d_z: Option<usize>,
    /// Projection-head output width.
    #[arg(long)]
    pub d_p: Option<usize>,
    /// Hidden width of the two-layer heads.
    #[arg(long)]
    pub d_h: Option<usize>,
    /// Number of emotion classes (C).
    #[arg(long)]
    pub classes: Option<usize>,
    /// Records per batch (M).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// AdamW learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// AdamW decoupled weight decay.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Weight of the reconstruction term inside the augmentation loss.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight of the contrastive loss.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Weight of the classification loss.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Weight of the consistency-discrimination loss.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Contrastive temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Fusion encoder depth.
    #[arg(long)]
    pub fe_layers: Option<usize>,
    /// Attention heads per fusion layer (must divide d_z).
    #[arg(long)]
    pub fe_heads: Option<usize>,
    /// Learned positional embeddings in the fusion encoder.
    #[arg(long)]
    pub pos_emb: Option<bool>,
    /// Longest fusion sequence when positional embeddings are on.
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// Sequences fed to the fusion encoder: `augmented` or `original`.
    #[arg(long)]
    pub fuse_input: Option<FuseInput>,
    /// Standard deviation of the autoencoder weights at initialization.
    #[arg(long)]
    pub ae_init_scale: Option<f64>,
    /// Optimizer steps (overrides epochs).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Passes over the training data when steps is unset.
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Training fixture (JSONL with a sibling `.meta.json`).
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    /// Validation fixture.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    /// Evaluation worker threads.
    #[arg(long)]
    pub eval_threads: Option<usize>,
}

macro_rules! apply {
    ($cfg:ident, $ov:ident; $($field:ident),*) => {
        $(if let Some(v) = $ov.$field.clone() { $cfg.$field = v; })*
    };
}

impl Overrides {
    /// `base`, then the config file, then individual flags.
    pub fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let mut merged = serde_json::to_value(&base)?;
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let file: serde_json::Value =
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                let serde_json::Value::Object(file) = file else {
                    return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
                };
                let obj = merged.as_object_mut().expect("config serializes to an object");
                for (k, v) in file {
                    let key = match k.as_str() {
                        "C" => "classes".to_string(),
                        "M" => "batch_size".to_string(),
                        _ => k,
                    };
                    obj.insert(key, v);
                }
                serde_json::from_value(merged).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => base,
        };
        let ov = self;
        apply!(cfg, ov; seed, d_z, d_p, d_h, classes, batch_size, lr, weight_decay, alpha, beta, gamma,
            delta, tau, fe_layers, fe_heads, pos_emb, max_seq_len, fuse_input, ae_init_scale, epochs, eval_threads);
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if self.steps.is_some() {
            cfg.steps = self.steps;
        }
        if self.train_data.is_some() {
            cfg.train_data = self.train_data.clone();
        }
        if self.val_data.is_some() {
            cfg.val_data = self.val_data.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
