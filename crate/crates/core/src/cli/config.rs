use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{GeneratorConfig, TemplateMix};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::relate::Branches;
use crate::rng::derive_seed;
use crate::train::TrainConfig;

/// Everything a run depends on. Every table and field is optional in TOML.
///
/// ```toml
/// seed = 1
/// [data]
/// n_train = 2000
/// [model]
/// branches = { co = true, pos = false, kp = true }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablate: AblateConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// `(template id, weight)` pairs; uniform over templates when absent.
    pub template_mix: Option<Vec<(usize, f64)>>,
    /// Use these annotation files instead of generating corpora.
    pub train_annotations: Option<PathBuf>,
    pub test_annotations: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 2000,
            n_test: 500,
            template_mix: None,
            train_annotations: None,
            test_annotations: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Branch sets to train and evaluate, e.g. `["none", "co", "co+kp"]`.
    pub variants: Vec<String>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            variants: ["none", "co", "pos", "kp"].iter().map(|s| s.to_string()).collect(),
        }
    }
}


impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative annotation paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.train_annotations, &mut cfg.data.test_annotations].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.num_classes != crate::corpus::NUM_CLASSES && self.data.train_annotations.is_none() {
            return Err(Error::Config(format!(
                "model.num_classes is {} but the generator emits {} classes",
                self.model.num_classes,
                crate::corpus::NUM_CLASSES
            )));
        }
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(Error::Config("data.n_train and data.n_test must be positive".into()));
        }
        for v in &self.ablate.variants {
            Branches::parse(v)?;
        }
        self.template_mix()?;
        Ok(())
    }

    pub fn template_mix(&self) -> Result<TemplateMix> {
        let mix = match &self.data.template_mix {
            Some(w) => TemplateMix::new(w),
            None => TemplateMix::uniform(&self.generator.templates),
        };
        mix.validate()?;
        for t in &mix.0 {
            self.generator.template(t.template)?;
        }
        Ok(mix)
    }

    /// First 12 hex digits of SHA-256 over the canonical JSON, seed excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let json = serde_json::to_string(&c).expect("config serialization is infallible");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_name(&self) -> String {
        format!("{}-{}", self.hash(), self.seed)
    }

    pub fn train_corpus_seed(&self) -> u64 {
        derive_seed(self.seed, 10)
    }

    pub fn test_corpus_seed(&self) -> u64 {
        derive_seed(self.seed, 11)
    }

    /// `{hash, seed, config}` for embedding in artifacts.
    pub fn provenance(&self) -> serde_json::Value {
        serde_json::json!({
            "config_hash": self.hash(),
            "seed": self.seed,
            "config": self,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_line_file_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\n[data]\nn_train = 10\n[train]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.data.n_train, 10);
        assert_eq!(cfg.data.n_test, 500);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn hash_ignores_seed_but_tracks_settings() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 9, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.run_name(), b.run_name());
        let mut c = a.clone();
        c.train.lr = 2e-4;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 12);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_variants() {
        assert!(matches!(RunConfig::from_toml("sed = 1"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[ablate]\nvariants = [\"co\", \"ctx\"]").is_err());
        assert!(RunConfig::from_toml("[data]\ntemplate_mix = [[0, 0.5], [9, 0.5]]").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }
}
