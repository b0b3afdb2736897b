//! Run configuration loaded from a single TOML file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Split, VocabSpec};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, TextEmbedder};
use crate::scalar::Scalar;
use crate::tuning::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    #[serde(default = "default_split")]
    pub split: Split,
    /// Images written by `synth`.
    #[serde(default = "default_images")]
    pub n_images: usize,
    /// Left/right spatial labels instead of plain shapes.
    #[serde(default)]
    pub spatial: bool,
    /// Optional `label<TAB>comma-separated floats` embedding table.
    #[serde(default)]
    pub text_table: Option<PathBuf>,
}

fn default_split() -> Split {
    Split::Train
}

fn default_images() -> usize {
    16
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Seeds the base model, synthetic data and training.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.data.root.is_relative() {
            cfg.data.root = base.join(&cfg.data.root);
        }
        if let Some(t) = cfg.data.text_table.as_mut().filter(|t| t.is_relative()) {
            *t = base.join(&*t);
        }
        Ok(cfg)
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.run.seed,
            ..self.train.clone()
        }
    }

    /// Shape vocabulary matching `model.class_vocab`.
    pub fn vocab_spec(&self) -> Result<VocabSpec> {
        let spec = if self.data.spatial {
            VocabSpec::spatial_disks(self.model.image_size)
        } else {
            VocabSpec::shapes(self.model.image_size)
        };
        if spec.labels() != self.model.class_vocab {
            return Err(Error::Config(format!(
                "class_vocab {:?} does not match the synthetic labels {:?}",
                self.model.class_vocab,
                spec.labels()
            )));
        }
        Ok(spec)
    }

    pub fn text_embedder(&self) -> Result<TextEmbedder> {
        match &self.data.text_table {
            Some(path) => {
                let t = TextEmbedder::load_table(path, self.model.text_dim)?;
                t.check_distinct(&self.model.class_vocab)?;
                Ok(t)
            }
            None => Ok(TextEmbedder::hashed(self.model.text_dim, self.run.seed)),
        }
    }

    /// Base model for this run.
    pub fn build_model<T: Scalar>(&self) -> Result<Model<T>> {
        Model::with_text(self.model.clone(), self.run.seed, self.text_embedder()?)
    }
}

#[derive(Deserialize)]
struct ModelSection {
    model: ModelConfig,
}

/// Reads only the `[model]` table of a run config; other tables may be absent.
pub fn load_model_config(path: &Path) -> Result<ModelConfig> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let section: ModelSection = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    section.model.validate()?;
    Ok(section.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
[model]
image_size = 64
patch_size = 8
embed_dim = 64
depth = 2
num_heads = 4
mlp_ratio = 4.0
text_dim = 64
prompt_dim = 32
decoder_depth = 2
decoder_heads = 4
decoder_mlp_dim = 128
class_vocab = ["disk", "square", "triangle", "blob"]

[train]
batch_size = 8
max_steps = 10

[data]
root = "data"

[run]
seed = 3
"#;

    #[test]
    fn parses_and_applies_seed() {
        let cfg = RunConfig::from_toml(TOY).unwrap();
        assert_eq!(cfg.train_config().seed, 3);
        assert_eq!(cfg.data.split, Split::Train);
        assert_eq!(cfg.vocab_spec().unwrap().labels(), cfg.model.class_vocab);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = TOY.replace("[run]", "[run]\ncolour = 1");
        assert!(matches!(RunConfig::from_toml(&bad), Err(Error::Config(_))));
    }
}
