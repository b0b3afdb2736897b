//! Text-promptable segmentation transformer with bias-tuning support.
//!
//! Pipeline: label → frozen text embedding → Text Affine Layer → frozen
//! prompt encoder → (with the encoded image) two-way mask decoder → logits.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod params;
pub mod prompt;
pub mod text;

use std::sync::Arc;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

pub use config::ModelConfig;
pub use decoder::MaskDecoder;
pub use encoder::{EncoderBlockParams, ImageEmbedding, ImageEncoder};
pub use params::{ParamMut, ParamRef, ParamSet};
pub use prompt::PromptEncoder;
pub use text::{Mode, RunningStats, TextAffineParams, TextEmbedder};

use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::ops;
use crate::raster::{BinaryMask, Image};
use crate::scalar::Scalar;
use crate::tuning::focal::{focal_loss_single, FocalLossConfig};

/// Pre-sigmoid mask scores at full image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> MaskLogits<T> {
    pub fn is_finite(&self) -> bool {
        ops::all_finite(&self.data)
    }
}

/// Every parameter tensor of the model, grouped by sub-network.
#[derive(Clone, Debug)]
pub struct Weights<T> {
    pub encoder: ImageEncoder<T>,
    pub tal: TextAffineParams<T>,
    pub prompt_encoder: PromptEncoder<T>,
    pub decoder: MaskDecoder<T>,
}

impl<T: Scalar> ParamSet<T> for Weights<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.encoder.collect(&params::join(prefix, "encoder"), out);
        self.tal.collect(&params::join(prefix, "tal"), out);
        self.prompt_encoder
            .collect(&params::join(prefix, "prompt_encoder"), out);
        self.decoder.collect(&params::join(prefix, "decoder"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.encoder
            .collect_mut(&params::join(prefix, "encoder"), out);
        self.tal.collect_mut(&params::join(prefix, "tal"), out);
        self.prompt_encoder
            .collect_mut(&params::join(prefix, "prompt_encoder"), out);
        self.decoder
            .collect_mut(&params::join(prefix, "decoder"), out);
    }

    fn zero_grad(&self) -> Self {
        Self {
            encoder: self.encoder.zero_grad(),
            tal: self.tal.zero_grad(),
            prompt_encoder: self.prompt_encoder.zero_grad(),
            decoder: self.decoder.zero_grad(),
        }
    }
}

/// Non-trainable state that is not a parameter: normalisation running
/// statistics and the positional-encoding projection.
pub struct BufferRef<'a, T> {
    pub name: &'static str,
    pub data: &'a [T],
    pub frozen: bool,
}

/// Result of a train-mode pass over one batch.
pub struct BatchGradients<T> {
    pub loss: T,
    pub per_sample_loss: Vec<T>,
    pub grads: Weights<T>,
    pub running: RunningStats<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    /// Seed that reproduces the frozen base weights.
    pub base_seed: u64,
    pub weights: Weights<T>,
    pub text: TextEmbedder,
    image_pe: Vec<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds the base model. Frozen weights are a deterministic function of
    /// `(config, base_seed)`; all shifts start at zero.
    pub fn new(config: ModelConfig, base_seed: u64) -> Result<Self> {
        let text = TextEmbedder::hashed(config.text_dim, base_seed);
        Self::with_text(config, base_seed, text)
    }

    pub fn with_text(config: ModelConfig, base_seed: u64, text: TextEmbedder) -> Result<Self> {
        config.validate()?;
        if text.dim() != config.text_dim {
            return Err(Error::Config(format!(
                "text embedder produces {} values, text_dim is {}",
                text.dim(),
                config.text_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        let encoder = ImageEncoder::new(&mut rng, &config);
        let prompt_encoder = PromptEncoder::new(&mut rng, config.prompt_dim);
        // trainable parts draw from their own stream so the frozen base does not
        // depend on decoder or TAL sizes
        let mut head_rng = ChaCha8Rng::seed_from_u64(base_seed ^ 0x9e37_79b9_7f4a_7c15);
        let tal = TextAffineParams::new(&mut head_rng, config.text_dim, config.prompt_dim);
        let decoder = MaskDecoder::new(&mut head_rng, &config);
        let image_pe = prompt_encoder.dense_pe(config.grid_size());
        Ok(Self {
            config,
            base_seed,
            weights: Weights {
                encoder,
                tal,
                prompt_encoder,
                decoder,
            },
            text,
            image_pe,
        })
    }

    pub fn params(&self) -> Vec<ParamRef<'_, T>> {
        self.weights.params()
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        self.weights.params_mut()
    }

    pub fn buffers(&self) -> Vec<BufferRef<'_, T>> {
        vec![
            BufferRef {
                name: "tal.norm.running_mean",
                data: &self.weights.tal.running_mean,
                frozen: false,
            },
            BufferRef {
                name: "tal.norm.running_var",
                data: &self.weights.tal.running_var,
                frozen: false,
            },
            BufferRef {
                name: "prompt_encoder.pe_gaussian",
                data: &self.weights.prompt_encoder.pe_gaussian,
                frozen: true,
            },
        ]
    }

    pub(crate) fn set_running(&mut self, mean: Vec<T>, var: Vec<T>) {
        self.weights.tal.running_mean = mean;
        self.weights.tal.running_var = var;
    }

    /// SHA-256 over every frozen tensor (name and little-endian `f32` bytes).
    pub fn frozen_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |name: &str, data: &[T]| {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((data.len() as u64).to_le_bytes());
            for v in data {
                h.update(v.as_f32().to_le_bytes());
            }
        };
        for p in self.params().iter().filter(|p| !p.trainable) {
            feed(&p.name, p.data);
        }
        for b in self.buffers().iter().filter(|b| b.frozen) {
            feed(b.name, b.data);
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn embed_text(&self, label: &str) -> Result<Vec<T>> {
        if self.config.class_index(label).is_none() {
            warn!("prompt {label:?} is outside the class vocabulary");
        }
        Ok(self.text.embed(label)?.into_iter().map(T::of).collect())
    }

    pub fn encode_image(&self, image: &Image) -> Result<ImageEmbedding<T>> {
        Ok(self.weights.encoder.forward(image, true)?.0)
    }

    /// Encoder pass that ignores every shift parameter.
    pub fn encode_image_without_shifts(&self, image: &Image) -> Result<ImageEmbedding<T>> {
        Ok(self.weights.encoder.forward(image, false)?.0)
    }

    pub fn text_affine(&self, embedding: &[T]) -> Result<Vec<T>> {
        self.weights.tal.forward_eval(embedding)
    }

    pub fn encode_prompt(&self, refined: &[T]) -> Result<Vec<T>> {
        if refined.len() != self.config.prompt_dim {
            return Err(Error::Shape(format!(
                "prompt embedding has {} values, prompt_dim is {}",
                refined.len(),
                self.config.prompt_dim
            )));
        }
        Ok(self.weights.prompt_encoder.encode(refined))
    }

    fn decoder_input(&self, emb: &ImageEmbedding<T>) -> Vec<T> {
        let mut features = emb.features.clone();
        ops::add_row(&mut features, &self.weights.prompt_encoder.no_mask_embed);
        features
    }

    pub fn decode_mask(
        &self,
        emb: &ImageEmbedding<T>,
        prompt_token: &[T],
    ) -> Result<MaskLogits<T>> {
        let c = self.config.prompt_dim;
        let g = self.config.grid_size();
        let s = self.config.image_size;
        if prompt_token.len() != c
            || emb.grid != g
            || emb.prompt_dim != c
            || emb.features.len() != g * g * c
            || emb.pixels.len() != s * s * 3
        {
            return Err(Error::Shape(
                "image or prompt embedding does not match the model configuration".into(),
            ));
        }
        let features = self.decoder_input(emb);
        let (data, _) =
            self.weights
                .decoder
                .forward(&features, &self.image_pe, prompt_token, &emb.pixels, g);
        Ok(MaskLogits {
            height: s,
            width: s,
            data,
        })
    }

    /// Full inference pass for one (image, label) pair.
    pub fn forward(&self, image: &Image, label: &str) -> Result<MaskLogits<T>> {
        let text = self.embed_text(label)?;
        let refined = self.text_affine(&text)?;
        let token = self.encode_prompt(&refined)?;
        let emb = self.encode_image(image)?;
        self.decode_mask(&emb, &token)
    }

    pub fn predict_mask(&self, image: &Image, label: &str) -> Result<BinaryMask> {
        let logits = self.forward(image, label)?;
        Ok(crate::eval::binarize(&logits, self.config.mask_threshold))
    }

    /// Train-mode loss and gradients for a batch.
    ///
    /// The loss is the batch mean of per-sample focal-loss sums. Samples that
    /// share an image (same `Arc`) share one encoder pass.
    pub fn batch_gradients(
        &self,
        batch: &[SegmentationSample],
        focal: &FocalLossConfig,
    ) -> Result<BatchGradients<T>> {
        let cfg = &self.config;
        let b = batch.len();
        let c = cfg.prompt_dim;
        let g = cfg.grid_size();
        for s in batch {
            if s.mask.height != cfg.image_size || s.mask.width != cfg.image_size {
                return Err(Error::Shape(format!(
                    "target mask is {}×{}, model expects {}×{}",
                    s.mask.height, s.mask.width, cfg.image_size, cfg.image_size
                )));
            }
        }

        let mut text = Vec::with_capacity(b * cfg.text_dim);
        for s in batch {
            text.extend(self.embed_text(&s.label)?);
        }
        let tal = &self.weights.tal;
        let (refined, tal_cache, running) = tal.forward_train(&text)?;
        let tokens = self.weights.prompt_encoder.encode(&refined);

        // group samples by shared image
        let mut images: Vec<(Arc<Image>, Vec<usize>)> = Vec::new();
        let mut image_of = Vec::with_capacity(b);
        for (i, s) in batch.iter().enumerate() {
            match images
                .iter()
                .position(|(img, _)| Arc::ptr_eq(img, &s.image))
            {
                Some(j) => {
                    images[j].1.push(i);
                    image_of.push(j);
                }
                None => {
                    image_of.push(images.len());
                    images.push((Arc::clone(&s.image), vec![i]));
                }
            }
        }

        let encoder = &self.weights.encoder;
        let encoded = images
            .par_iter()
            .map(|(img, _)| encoder.forward(img, true))
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<Vec<T>> = encoded.iter().map(|(e, _)| self.decoder_input(e)).collect();

        let scale = T::one() / T::of(b as f64);
        let decoder = &self.weights.decoder;
        let per_sample = batch
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let j = image_of[i];
                let emb = &encoded[j].0;
                let token = &tokens[i * c..(i + 1) * c];
                let (logits, cache) =
                    decoder.forward(&inputs[j], &self.image_pe, token, &emb.pixels, g);
                let (loss, mut dlogits) = focal_loss_single(&logits, &s.mask.data, focal);
                if !loss.is_finite() || !ops::all_finite(&logits) {
                    return Err(Error::NonFiniteLoss {
                        index: i,
                        label: s.label.clone(),
                    });
                }
                dlogits.iter_mut().for_each(|d| *d *= scale);
                let mut grad = decoder.zero_grad();
                let (dfeat, dtoken) = decoder.backward(&cache, &dlogits, &emb.pixels, &mut grad);
                Ok((loss, grad, dfeat, dtoken))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut grads = self.weights.zero_grad();
        let mut per_sample_loss = Vec::with_capacity(b);
        let mut dtokens = Vec::with_capacity(b * c);
        let mut dfeatures: Vec<Vec<T>> =
            images.iter().map(|_| vec![T::zero(); g * g * c]).collect();
        for (i, (loss, grad, dfeat, dtoken)) in per_sample.into_iter().enumerate() {
            per_sample_loss.push(loss);
            params::accumulate(&mut grads.decoder, &grad);
            ops::add_assign(&mut dfeatures[image_of[i]], &dfeat);
            dtokens.extend(dtoken);
        }

        let encoder_grads = encoded
            .par_iter()
            .zip(dfeatures.par_iter())
            .map(|((_, cache), dfeat)| {
                let mut grad = encoder.zero_grad();
                encoder.backward(cache, dfeat, &mut grad);
                grad
            })
            .collect::<Vec<_>>();
        for grad in &encoder_grads {
            params::accumulate(&mut grads.encoder, grad);
        }

        let drefined = self.weights.prompt_encoder.backward(&dtokens);
        tal.backward_train(&tal_cache, &drefined, &mut grads.tal);

        let loss = per_sample_loss.iter().copied().sum::<T>() * scale;
        Ok(BatchGradients {
            loss,
            per_sample_loss,
            grads,
            running,
        })
    }
}
