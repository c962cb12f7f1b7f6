//! Pipeline-wide configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codebook::{DEFAULT_MAX_ITERS, MAX_VOCAB};
use crate::dsp::SpectrogramConfig;
use crate::error::{Error, Result};
use crate::evalpipe::{DEFAULT_BUDGET_SECONDS, DEFAULT_PROJECTION_FILES, FRAME_SECONDS};
use crate::nn::{StudentArch, TrainConfig, HEAD_HIDDEN};
use crate::sgns::SgnsConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    pub embed_dim: usize,
    pub channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub temperature: f64,
    /// Initialize the token embedding from the SGNS table instead of noise.
    pub init_from_sgns: bool,
    pub train: TrainConfig,
}

impl Default for StudentConfig {
    fn default() -> Self {
        let arch = StudentArch::default();
        Self {
            embed_dim: arch.embed_dim,
            channels: arch.channels,
            hidden: arch.hidden,
            kernel: arch.kernel,
            temperature: arch.temperature,
            init_from_sgns: false,
            train: TrainConfig::default(),
        }
    }
}

impl StudentConfig {
    pub fn arch(&self, vocab_size: usize, n_classes: usize) -> StudentArch {
        StudentArch {
            vocab_size,
            embed_dim: self.embed_dim,
            channels: self.channels,
            hidden: self.hidden,
            n_classes,
            kernel: self.kernel,
            temperature: self.temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub frame_seconds: f64,
    pub split_ratio: f64,
    pub budget_seconds: f64,
    pub n_projection: usize,
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            frame_seconds: FRAME_SECONDS,
            split_ratio: 0.8,
            budget_seconds: DEFAULT_BUDGET_SECONDS,
            n_projection: DEFAULT_PROJECTION_FILES,
            top_k: 5,
        }
    }
}

/// Default artifact locations; command-line flags take precedence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ArtifactPaths {
    pub pca: Option<PathBuf>,
    pub codebook: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    pub student: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Seed for PCA subsampling, k-means and dataset splits.
    pub seed: u64,
    pub spectrogram: SpectrogramConfig,
    pub pca_k: usize,
    /// Rows sampled from the training frames for the PCA fit; 0 uses all.
    pub pca_max_rows: usize,
    pub vocab_size: usize,
    pub kmeans_max_iters: usize,
    /// Rows sampled for the k-means fit; 0 uses all.
    pub kmeans_max_rows: usize,
    pub sgns: SgnsConfig,
    pub head_hidden: usize,
    pub head: TrainConfig,
    pub student: StudentConfig,
    pub eval: EvalConfig,
    pub paths: ArtifactPaths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            spectrogram: SpectrogramConfig::default(),
            pca_k: 128,
            pca_max_rows: 200_000,
            vocab_size: 16_384,
            kmeans_max_iters: DEFAULT_MAX_ITERS,
            kmeans_max_rows: 0,
            sgns: SgnsConfig::default(),
            head_hidden: HEAD_HIDDEN,
            head: TrainConfig::default(),
            student: StudentConfig::default(),
            eval: EvalConfig::default(),
            paths: ArtifactPaths::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.spectrogram.validate()?;
        if self.pca_k == 0 || self.pca_k > self.spectrogram.n_mels {
            return Err(Error::Config(format!(
                "pca_k {} must lie in 1..={} (n_mels)",
                self.pca_k, self.spectrogram.n_mels
            )));
        }
        if self.vocab_size == 0 || self.vocab_size > MAX_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size {} must lie in 1..={MAX_VOCAB}",
                self.vocab_size
            )));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        self.sgns.validate()?;
        self.head.validate()?;
        self.student.train.validate()?;
        self.student.arch(self.vocab_size, 1).validate()?;
        let e = &self.eval;
        if !(e.split_ratio > 0.0 && e.split_ratio < 1.0) {
            return Err(Error::Config("eval.split_ratio must lie in (0, 1)".into()));
        }
        crate::evalpipe::tokens_per_frame(self.spectrogram.frames_per_second(), e.frame_seconds)
            .map_err(|err| Error::Config(err.to_string()))?;
        if !(e.budget_seconds > 0.0) || e.top_k == 0 {
            return Err(Error::Config("eval.budget_seconds and eval.top_k must be positive".into()));
        }
        Ok(())
    }

    /// Uses `seed` for every seeded stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sgns.seed = seed;
        self.head.seed = seed;
        self.student.train.seed = seed;
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Writes the resolved configuration next to `output` as
    /// `<output>.config.toml`.
    pub fn write_sidecar(&self, output: &Path) -> Result<PathBuf> {
        let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".config.toml");
        let path = output.with_file_name(name);
        crate::store::write_atomic(&path, self.to_toml().as_bytes())?;
        Ok(path)
    }
}
