//! Run configuration: an optional JSON file merged with command-line flags
//! (flags win), resolved into a validated [`TrainConfig`].

use std::path::{Path, PathBuf};

use deepmil::{AugmentConfig, LossScheme, Preset, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::fsutil;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentFile {
    pub flip_prob: Option<f64>,
    pub max_shift_frac: Option<f64>,
    pub max_rotate_deg: Option<f64>,
    pub cutout_side: Option<usize>,
}

/// Every field is optional; unset fields fall back to the scheme and
/// preset defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub loss: Option<String>,
    pub preset: Option<String>,
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub k: Option<usize>,
    /// Label-assignment warm-up length in epochs; 0 disables it.
    pub warmup_epochs: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub folds: Option<usize>,
    pub augment: Option<AugmentFile>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f; } )*
    };
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        serde_json::from_slice(&bytes).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// `self` with every field set in `flags` replaced.
    pub fn merged(mut self, flags: RunConfig) -> Self {
        overlay!(self, flags; data, out, loss, preset, lambda, mu, k, warmup_epochs,
            epochs, batch_size, lr, seed, folds);
        if let Some(f) = flags.augment {
            let a = self.augment.get_or_insert_with(AugmentFile::default);
            overlay!(a, f; flip_prob, max_shift_frac, max_rotate_deg, cutout_side);
        }
        self
    }

    pub fn require_data(&self) -> Result<&Path> {
        self.data.as_deref().ok_or_else(|| {
            CliError::Usage("missing dataset directory: pass --data or set `data` in the config file".into())
        })
    }

    pub fn require_out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("missing output path: pass --out or set `out` in the config file".into()))
    }

    pub fn scheme(&self) -> Result<LossScheme> {
        let name = self
            .loss
            .as_deref()
            .ok_or_else(|| CliError::Usage("missing loss: pass --loss (maxpool, labelassign or sparse)".into()))?;
        name.parse().map_err(|e: deepmil::Error| CliError::Usage(e.to_string()))
    }

    pub fn preset(&self) -> Result<Preset> {
        match self.preset.as_deref() {
            None => Ok(Preset::Tiny),
            Some(p) => p.parse().map_err(|e: deepmil::Error| CliError::Usage(e.to_string())),
        }
    }

    /// Resolves defaults and validates every field before any work starts.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::new(self.scheme()?, self.preset()?);
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.mu {
            cfg.mu = v;
        }
        if self.k.is_some() {
            cfg.k = self.k;
        }
        if let Some(w) = self.warmup_epochs {
            cfg.k_warmup = match (w, cfg.k_warmup) {
                (0, _) | (_, None) => None,
                (w, Some((start, _))) => Some((start, w)),
            };
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.adam.lr = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(a) = &self.augment {
            let d = AugmentConfig::default();
            cfg.augment = AugmentConfig {
                flip_prob: a.flip_prob.unwrap_or(d.flip_prob),
                max_shift_frac: a.max_shift_frac.unwrap_or(d.max_shift_frac),
                max_rotate_deg: a.max_rotate_deg.unwrap_or(d.max_rotate_deg),
                cutout_side: a.cutout_side.unwrap_or(d.cutout_side),
            };
        }
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}
