//! Run configuration (TOML), validated before any compute.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiments::SweepConfig;
use crate::model::{Dimensions, NoiseSpec};
use crate::optimizer::{OptimOptions, Scope};
use crate::rng::{derive_seed, stream};
use crate::selection::DecimationOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Pixels per side of both frames.
    pub w: usize,
    pub density: f64,
    pub m_samples: usize,
    /// Noise level of a single dataset.
    pub sigma: f64,
    /// Noise levels of a sweep.
    pub sigma_grid: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
    pub scope: Scope,
    pub balance: bool,
    pub spot_width: f64,
    pub optim: OptimOptions,
    pub decimation: DecimationOptions,
    /// Output directory; `--out` takes precedence. Not part of the fingerprint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sweep = SweepConfig::default();
        Self {
            w: 4,
            density: 0.25,
            m_samples: 500,
            sigma: 0.0,
            sigma_grid: sweep.sigma_grid,
            replicates: sweep.replicates,
            seed: 1,
            scope: Scope::Output,
            balance: false,
            spot_width: sweep.spot_width,
            optim: OptimOptions::default(),
            decimation: DecimationOptions::default(),
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = Dimensions::new(self.w)?;
        if !(self.density > 0.0 && self.density <= 1.0) || self.density * (dims.n_half() as f64) < 1.0 {
            return Err(Error::Config(format!(
                "density must lie in (0, 1] and give at least one entry per row, got {}",
                self.density
            )));
        }
        if self.m_samples == 0 {
            return Err(Error::Config("m_samples must be positive".into()));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config("sigma must be finite and >= 0".into()));
        }
        self.to_sweep().validate()
    }

    /// Hash of the canonical JSON form (without the output directory).
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..16])
    }

    pub fn dims(&self) -> Dimensions {
        Dimensions::new(self.w).expect("validated")
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec::homogeneous(self.sigma, self.dims().n_half()).expect("validated")
    }

    /// Channel seed; the same channel as replicate 0 of a sweep.
    pub fn matrix_seed(&self) -> u64 {
        self.to_sweep().matrix_seed(0)
    }

    pub fn dataset_seed(&self) -> u64 {
        derive_seed(self.seed, &[stream::DATASET])
    }

    pub fn probe_seed(&self) -> u64 {
        derive_seed(self.seed, &[stream::PROBE])
    }

    pub fn to_sweep(&self) -> SweepConfig {
        SweepConfig {
            w: self.w,
            density: self.density,
            m_samples: self.m_samples,
            sigma_grid: self.sigma_grid.clone(),
            replicates: self.replicates,
            seed: self.seed,
            scope: self.scope,
            balance: self.balance,
            spot_width: self.spot_width,
            optim: self.optim,
            decimation: self.decimation,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_nested_tables() {
        let cfg = RunConfig::from_toml(
            r#"
            w = 3
            density = 0.5
            sigma = 0.1
            scope = "all"
            [optim]
            max_iters = 50
            [decimation]
            fraction = 0.2
            [decimation.bic]
            pl = "mean"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.w, 3);
        assert_eq!(cfg.scope, Scope::All);
        assert_eq!(cfg.optim.max_iters, 50);
        assert_eq!(cfg.optim.memory, 10);
        assert_eq!(cfg.decimation.fraction, 0.2);
    }

    #[test]
    fn rejects_unknown_and_invalid_keys() {
        assert!(matches!(RunConfig::from_toml("wdith = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[optim]\ntolerance = 1"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("w = 1").is_err());
        assert!(RunConfig::from_toml("sigma = -0.1").is_err());
        assert!(RunConfig::from_toml("sigma_grid = [0.2, 0.1]").is_err());
        assert!(RunConfig::from_toml("density = 0.01").is_err());
        assert!(RunConfig::from_toml("[decimation]\nfraction = 0").is_err());
    }

    #[test]
    fn fingerprint_ignores_output_directory() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = Some("/tmp/x".into());
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 2;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
