//! The built-in toy setting: a synthetic language, a small decoder trained
//! on it, and disjoint streams for calibration and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::corpus::SyntheticLanguage;
use crate::error::Result;
use crate::io::{load_model, save_model};
use crate::model::{plant_activation_outliers, train, ModelConfig, ModelParams, OutlierPlanting, TrainSettings};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySettings {
    pub config: ModelConfig,
    pub language_seed: u64,
    pub init_seed: u64,
    pub train: TrainSettings,
    pub train_tokens: usize,
    pub planting: Option<OutlierPlanting>,
}

impl Default for ToySettings {
    fn default() -> Self {
        ToySettings {
            config: ModelConfig::default(),
            language_seed: 1,
            init_seed: 0,
            train: TrainSettings {
                steps: 300,
                ..TrainSettings::default()
            },
            train_tokens: 200_000,
            planting: Some(OutlierPlanting::default()),
        }
    }
}

/// Stream seeds; each use gets its own so the streams never coincide.
const TRAIN_STREAM: u64 = 100;
const CALIB_STREAM: u64 = 200;
const EVAL_STREAM: u64 = 300;

impl ToySettings {
    pub fn language(&self) -> Result<SyntheticLanguage> {
        SyntheticLanguage::new(self.config.vocab, self.language_seed)
    }

    pub fn train_stream(&self) -> Result<Vec<u32>> {
        Ok(self.language()?.sample(self.train_tokens, TRAIN_STREAM))
    }

    /// Tokens calibration segments are drawn from.
    pub fn calibration_stream(&self, len: usize) -> Result<Vec<u32>> {
        Ok(self.language()?.sample(len, CALIB_STREAM))
    }

    pub fn eval_stream(&self, len: usize) -> Result<Vec<u32>> {
        Ok(self.language()?.sample(len, EVAL_STREAM))
    }

    /// Short digest of everything that determines the trained weights.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(format!("{self:?}").as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Trains from scratch, then plants activation outliers.
    pub fn build(&self) -> Result<ModelParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed);
        let mut model = ModelParams::random(self.config, &mut rng)?;
        train(&mut model, &self.train_stream()?, &self.train)?;
        if let Some(p) = &self.planting {
            plant_activation_outliers(&mut model, p);
        }
        Ok(model)
    }

    pub fn cache_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("toy-{}.cbqf", self.fingerprint()))
    }

    /// Loads the trained model from `dir` or builds and stores it there.
    pub fn load_or_build(&self, dir: &Path) -> Result<ModelParams> {
        let path = self.cache_path(dir);
        if let Ok(model) = load_model(&path) {
            return Ok(model);
        }
        let model = self.build()?;
        fs::create_dir_all(dir)?;
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        save_model(&tmp, &model)?;
        fs::rename(&tmp, &path)?;
        Ok(model)
    }
}
