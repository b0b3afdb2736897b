//! Frozen/trainable labelling of every model parameter.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ParamRef};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    FrozenBackbone,
    ShiftBias,
    LayerNorm,
    PositionalEmbedding,
    Tal,
    Decoder,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::FrozenBackbone,
        Category::ShiftBias,
        Category::LayerNorm,
        Category::PositionalEmbedding,
        Category::Tal,
        Category::Decoder,
    ];

    pub fn trainable(self) -> bool {
        self != Category::FrozenBackbone
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::FrozenBackbone => "frozen-backbone",
            Category::ShiftBias => "shift-bias",
            Category::LayerNorm => "layer-norm",
            Category::PositionalEmbedding => "positional-embedding",
            Category::Tal => "tal",
            Category::Decoder => "decoder",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Maps a parameter path to its category. Paths no rule covers are errors,
/// so new layers must be classified explicitly.
pub fn categorize(name: &str) -> Result<Category> {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if name.starts_with("decoder.") {
        return Ok(Category::Decoder);
    }
    if name.starts_with("tal.") {
        return Ok(Category::Tal);
    }
    if name.starts_with("encoder.") {
        return match leaf {
            "shift" => Ok(Category::ShiftBias),
            "gamma" | "beta" => Ok(Category::LayerNorm),
            "pos_embed" => Ok(Category::PositionalEmbedding),
            "weight" | "bias" => Ok(Category::FrozenBackbone),
            _ => Err(Error::UncategorizedParameter(name.to_string())),
        };
    }
    if name.starts_with("prompt_encoder.") {
        return match leaf {
            "weight" | "bias" | "no_mask_embed" => Ok(Category::FrozenBackbone),
            _ => Err(Error::UncategorizedParameter(name.to_string())),
        };
    }
    Err(Error::UncategorizedParameter(name.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionEntry {
    pub parameter_id: String,
    pub count: usize,
    pub category: Category,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryTotal {
    pub count: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterPartition {
    pub entries: Vec<PartitionEntry>,
}

impl ParameterPartition {
    /// Builds a partition from `(path, element count)` pairs.
    pub fn from_counts<'a, I>(params: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, usize)>,
    {
        let mut seen = std::collections::BTreeSet::new();
        let mut entries = Vec::new();
        for (name, count) in params {
            if !seen.insert(name.to_string()) {
                return Err(Error::Config(format!("parameter {name:?} listed twice")));
            }
            let category = categorize(name)?;
            entries.push(PartitionEntry {
                parameter_id: name.to_string(),
                count,
                category,
                trainable: category.trainable(),
            });
        }
        Ok(Self { entries })
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.count).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.count)
            .sum()
    }

    pub fn trainable_ratio(&self) -> f64 {
        self.trainable_count() as f64 / self.total_count() as f64
    }

    pub fn category_of(&self, name: &str) -> Option<Category> {
        self.entries
            .iter()
            .find(|e| e.parameter_id == name)
            .map(|e| e.category)
    }

    pub fn totals(&self) -> BTreeMap<Category, CategoryTotal> {
        let mut out = BTreeMap::new();
        for c in Category::ALL {
            out.insert(
                c,
                CategoryTotal {
                    count: 0,
                    trainable: c.trainable(),
                },
            );
        }
        for e in &self.entries {
            out.get_mut(&e.category)
                .expect("all categories present")
                .count += e.count;
        }
        out
    }

    /// JSON summary: category → `{count, trainable}`.
    pub fn summary_json(&self) -> String {
        let totals: BTreeMap<String, CategoryTotal> = self
            .totals()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        serde_json::to_string_pretty(&totals).expect("plain map serialises")
    }

    /// Human-readable table of category totals and the trainable ratio.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<22} {:>14} {:>10}\n",
            "category", "parameters", "trainable"
        );
        for (cat, t) in self.totals() {
            s += &format!("{:<22} {:>14} {:>10}\n", cat.as_str(), t.count, t.trainable);
        }
        s += &format!(
            "{:<22} {:>14}\n{:<22} {:>14}\ntrainable_ratio {:.6}\n",
            "total",
            self.total_count(),
            "trainable total",
            self.trainable_count(),
            self.trainable_ratio()
        );
        s
    }
}

fn check_flags<T>(params: &[ParamRef<'_, T>], partition: &ParameterPartition) -> Result<()> {
    for (p, e) in params.iter().zip(&partition.entries) {
        if p.trainable != e.trainable {
            return Err(Error::Config(format!(
                "parameter {} is stored as trainable={} but categorised {}",
                p.name, p.trainable, e.category
            )));
        }
    }
    Ok(())
}

/// Labels every parameter of `model` and checks the labels against the
/// trainable flags the parameter store carries.
pub fn partition_parameters<T: Scalar>(model: &Model<T>) -> Result<ParameterPartition> {
    let params = model.params();
    let partition =
        ParameterPartition::from_counts(params.iter().map(|p| (p.name.as_str(), p.numel())))?;
    check_flags(&params, &partition)?;
    Ok(partition)
}
