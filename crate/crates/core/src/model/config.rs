use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the promptable segmentation model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Number of encoder blocks.
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub text_dim: usize,
    /// Channel width of prompt tokens and of the mask decoder.
    pub prompt_dim: usize,
    pub decoder_depth: usize,
    #[serde(default = "default_decoder_heads")]
    pub decoder_heads: usize,
    #[serde(default = "default_decoder_mlp_dim")]
    pub decoder_mlp_dim: usize,
    /// Channel reduction inside the decoder's token/image cross-attention.
    #[serde(default = "default_attention_downsample")]
    pub attention_downsample: usize,
    pub class_vocab: Vec<String>,
    #[serde(default = "default_mask_threshold")]
    pub mask_threshold: f64,
}

fn default_decoder_heads() -> usize {
    8
}

fn default_decoder_mlp_dim() -> usize {
    2048
}

fn default_attention_downsample() -> usize {
    2
}

fn default_mask_threshold() -> f64 {
    0.5
}

impl ModelConfig {
    /// Desk-scale configuration used by the overfit runs.
    pub fn toy(class_vocab: Vec<String>) -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 2,
            num_heads: 4,
            mlp_ratio: 4.0,
            text_dim: 64,
            prompt_dim: 32,
            decoder_depth: 2,
            decoder_heads: 4,
            decoder_mlp_dim: 128,
            attention_downsample: 2,
            class_vocab,
            mask_threshold: 0.5,
        }
    }

    /// ViT-base image encoder at 1024 px with a SAM-sized decoder.
    pub fn vit_base_like(class_vocab: Vec<String>) -> Self {
        Self {
            image_size: 1024,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_ratio: 4.0,
            text_dim: 512,
            prompt_dim: 256,
            decoder_depth: 2,
            decoder_heads: 8,
            decoder_mlp_dim: 2048,
            attention_downsample: 2,
            class_vocab,
            mask_threshold: 0.5,
        }
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    pub fn mlp_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Number of 2× transposed-convolution stages from token grid to pixels.
    pub fn upscale_stages(&self) -> usize {
        self.patch_size.trailing_zeros() as usize
    }

    /// Output channels of each upscaling stage; the last entry is the width
    /// of the per-pixel mask features.
    pub fn upscale_channels(&self) -> Vec<usize> {
        (0..self.upscale_stages())
            .map(|i| (self.prompt_dim >> (i + 1)).max(8))
            .collect()
    }

    pub fn mask_feature_dim(&self) -> usize {
        self.upscale_channels()
            .last()
            .copied()
            .unwrap_or(self.prompt_dim)
    }

    pub fn cross_attention_dim(&self) -> usize {
        self.prompt_dim / self.attention_downsample
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_vocab.iter().position(|l| l == label)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("num_heads", self.num_heads),
            ("text_dim", self.text_dim),
            ("prompt_dim", self.prompt_dim),
            ("decoder_heads", self.decoder_heads),
            ("decoder_mlp_dim", self.decoder_mlp_dim),
            ("attention_downsample", self.attention_downsample),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.patch_size.is_power_of_two() || self.patch_size < 2 {
            return fail(format!(
                "patch_size {} must be a power of two ≥ 2",
                self.patch_size
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.mlp_dim() == 0 {
            return fail(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        if !self.prompt_dim.is_multiple_of(2) {
            return fail(format!("prompt_dim {} must be even", self.prompt_dim));
        }
        if !self.prompt_dim.is_multiple_of(self.decoder_heads) {
            return fail(format!(
                "prompt_dim {} not divisible by decoder_heads {}",
                self.prompt_dim, self.decoder_heads
            ));
        }
        if !self.prompt_dim.is_multiple_of(self.attention_downsample)
            || !self
                .cross_attention_dim()
                .is_multiple_of(self.decoder_heads)
        {
            return fail(format!(
                "prompt_dim {} / attention_downsample {} must be divisible by decoder_heads {}",
                self.prompt_dim, self.attention_downsample, self.decoder_heads
            ));
        }
        if self.class_vocab.is_empty() {
            return fail("class_vocab is empty".into());
        }
        let mut seen = BTreeSet::new();
        for label in &self.class_vocab {
            if !seen.insert(label) {
                return fail(format!("duplicate class label {label:?}"));
            }
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return fail(format!(
                "mask_threshold {} must lie in (0, 1)",
                self.mask_threshold
            ));
        }
        Ok(())
    }
}
