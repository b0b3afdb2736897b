//! Frozen prompt encoder: projects refined text embeddings into a sparse
//! prompt token and supplies the dense image positional encoding.

use rand::Rng;

use super::layers::{normal_vec, Linear};
use super::params::{join, push, push_mut, ParamMut, ParamRef, ParamSet};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct PromptEncoder<T> {
    pub text_proj: Linear<T>,
    /// Dense embedding added to image features when no mask prompt is given.
    pub no_mask_embed: Vec<T>,
    /// Random Fourier projection `2 × prompt_dim/2` (buffer, never trained).
    pub pe_gaussian: Vec<T>,
}

impl<T: Scalar> PromptEncoder<T> {
    pub fn new<R: Rng>(rng: &mut R, prompt_dim: usize) -> Self {
        Self {
            text_proj: Linear::frozen(rng, prompt_dim, prompt_dim, false),
            no_mask_embed: normal_vec(rng, prompt_dim, 0.02),
            pe_gaussian: normal_vec(rng, prompt_dim, 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.no_mask_embed.len()
    }

    pub fn encode(&self, refined: &[T]) -> Vec<T> {
        self.text_proj.forward(refined, refined.len() / self.dim())
    }

    /// Gradient of the prompt token mapped back onto the refined embedding.
    pub fn backward(&self, dtoken: &[T]) -> Vec<T> {
        let mut scratch = self.text_proj.zero_grad();
        self.text_proj
            .backward(&[], dtoken, dtoken.len() / self.dim(), &mut scratch, true)
            .expect("dx requested")
    }

    /// Sinusoidal encoding of cell centres of a `grid × grid` layout.
    pub fn dense_pe(&self, grid: usize) -> Vec<T> {
        let half = self.dim() / 2;
        let two_pi = T::of(2.0 * std::f64::consts::PI);
        let mut out = Vec::with_capacity(grid * grid * 2 * half);
        for y in 0..grid {
            for x in 0..grid {
                let cx = T::of(2.0 * (x as f64 + 0.5) / grid as f64 - 1.0);
                let cy = T::of(2.0 * (y as f64 + 0.5) / grid as f64 - 1.0);
                let proj: Vec<T> = (0..half)
                    .map(|j| two_pi * (cx * self.pe_gaussian[j] + cy * self.pe_gaussian[half + j]))
                    .collect();
                out.extend(proj.iter().map(|v| v.sin()));
                out.extend(proj.iter().map(|v| v.cos()));
            }
        }
        out
    }
}

impl<T: Scalar> ParamSet<T> for PromptEncoder<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.text_proj.collect(&join(prefix, "text_proj"), out);
        push(
            out,
            prefix,
            "no_mask_embed",
            vec![self.dim()],
            &self.no_mask_embed,
            false,
        );
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.text_proj.collect_mut(&join(prefix, "text_proj"), out);
        push_mut(out, prefix, "no_mask_embed", &mut self.no_mask_embed, false);
    }

    fn zero_grad(&self) -> Self {
        Self {
            text_proj: self.text_proj.zero_grad(),
            no_mask_embed: Vec::new(),
            pe_gaussian: Vec::new(),
        }
    }
}
