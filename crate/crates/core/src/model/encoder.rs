//! Patch-embedding ViT image encoder with per-affine shift biases.

use rand::Rng;

use super::config::ModelConfig;
use super::layers::{
    attention_backward, attention_forward, normal_vec, Activation, LayerNorm, LayerNormCache,
    Linear, Mlp, MlpCache,
};
use super::params::{join, push, push_mut, ParamMut, ParamRef, ParamSet};
use crate::error::{Error, Result};
use crate::ops;
use crate::raster::Image;
use crate::scalar::Scalar;

/// Weights of one pre-norm transformer block.
///
/// Every affine map is frozen and carries a zero-initialised shift; the two
/// layer norms are trainable.
#[derive(Clone, Debug)]
pub struct EncoderBlockParams<T> {
    pub ln1: LayerNorm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
    pub num_heads: usize,
}

pub(crate) struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    ln2: LayerNormCache<T>,
    mlp: MlpCache<T>,
}

impl<T: Scalar> EncoderBlockParams<T> {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, mlp_dim: usize, num_heads: usize) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            qkv: Linear::frozen(rng, dim, 3 * dim, true),
            proj: Linear::frozen(rng, dim, dim, true),
            ln2: LayerNorm::new(dim),
            mlp: Mlp {
                fc1: Linear::frozen(rng, dim, mlp_dim, true),
                fc2: Linear::frozen(rng, mlp_dim, dim, true),
                act: Activation::Gelu,
            },
            num_heads,
        }
    }

    fn dim(&self) -> usize {
        self.ln1.dim()
    }

    pub(crate) fn forward(&self, x: &[T], n: usize, use_shift: bool) -> (Vec<T>, BlockCache<T>) {
        let d = self.dim();
        let (h1, ln1) = self.ln1.forward(x);
        let qkv = self.qkv.forward_with(&h1, n, use_shift);
        let mut q = Vec::with_capacity(n * d);
        let mut k = Vec::with_capacity(n * d);
        let mut v = Vec::with_capacity(n * d);
        for row in qkv.chunks(3 * d) {
            q.extend_from_slice(&row[..d]);
            k.extend_from_slice(&row[d..2 * d]);
            v.extend_from_slice(&row[2 * d..]);
        }
        let (attn, probs) = attention_forward(&q, &k, &v, n, n, d, self.num_heads);
        let proj = self.proj.forward_with(&attn, n, use_shift);
        let x1 = ops::added(x, &proj);
        let (h2, ln2) = self.ln2.forward(&x1);
        let (m, mlp) = self.mlp.forward(&h2, n, use_shift);
        let out = ops::added(&x1, &m);
        (
            out,
            BlockCache {
                ln1,
                h1,
                q,
                k,
                v,
                probs,
                attn,
                ln2,
                mlp,
            },
        )
    }

    pub(crate) fn backward(
        &self,
        cache: &BlockCache<T>,
        dout: &[T],
        n: usize,
        grad: &mut EncoderBlockParams<T>,
    ) -> Vec<T> {
        let d = self.dim();
        let dh2 = self.mlp.backward(&cache.mlp, dout, &mut grad.mlp);
        let mut dx1 = self.ln2.backward(&cache.ln2, &dh2, &mut grad.ln2);
        ops::add_assign(&mut dx1, dout);
        let dattn = self
            .proj
            .backward(&cache.attn, &dx1, n, &mut grad.proj, true)
            .expect("dx requested");
        let (dq, dk, dv) = attention_backward(
            &dattn,
            &cache.q,
            &cache.k,
            &cache.v,
            &cache.probs,
            n,
            n,
            d,
            self.num_heads,
        );
        let mut dqkv = Vec::with_capacity(n * 3 * d);
        for r in 0..n {
            dqkv.extend_from_slice(&dq[r * d..(r + 1) * d]);
            dqkv.extend_from_slice(&dk[r * d..(r + 1) * d]);
            dqkv.extend_from_slice(&dv[r * d..(r + 1) * d]);
        }
        let dh1 = self
            .qkv
            .backward(&cache.h1, &dqkv, n, &mut grad.qkv, true)
            .expect("dx requested");
        let mut dx = self.ln1.backward(&cache.ln1, &dh1, &mut grad.ln1);
        ops::add_assign(&mut dx, &dx1);
        dx
    }
}

impl<T: Scalar> ParamSet<T> for EncoderBlockParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.ln1.collect(&join(prefix, "ln1"), out);
        self.qkv.collect(&join(prefix, "attn.qkv"), out);
        self.proj.collect(&join(prefix, "attn.proj"), out);
        self.ln2.collect(&join(prefix, "ln2"), out);
        self.mlp.collect(&join(prefix, "mlp"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.ln1.collect_mut(&join(prefix, "ln1"), out);
        self.qkv.collect_mut(&join(prefix, "attn.qkv"), out);
        self.proj.collect_mut(&join(prefix, "attn.proj"), out);
        self.ln2.collect_mut(&join(prefix, "ln2"), out);
        self.mlp.collect_mut(&join(prefix, "mlp"), out);
    }

    fn zero_grad(&self) -> Self {
        Self {
            ln1: self.ln1.zero_grad(),
            qkv: self.qkv.zero_grad(),
            proj: self.proj.zero_grad(),
            ln2: self.ln2.zero_grad(),
            mlp: self.mlp.zero_grad(),
            num_heads: self.num_heads,
        }
    }
}

/// Encoder output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding<T> {
    /// Tokens per side of the square grid.
    pub grid: usize,
    pub embed_dim: usize,
    /// Transformer trunk output, `grid² × embed_dim`.
    pub tokens: Vec<T>,
    pub prompt_dim: usize,
    /// Neck output consumed by the decoder, `grid² × prompt_dim`.
    pub features: Vec<T>,
    /// Full-resolution pixels, `(H·W) × 3`, for the decoder's pixel skip.
    pub pixels: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder<T> {
    pub image_size: usize,
    pub patch_size: usize,
    pub patch_embed: Linear<T>,
    /// Learned positional table, `grid² × embed_dim`.
    pub pos_embed: Vec<T>,
    pub blocks: Vec<EncoderBlockParams<T>>,
    pub neck: Linear<T>,
    pub neck_norm: LayerNorm<T>,
}

pub(crate) struct EncoderCache<T> {
    patches: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    trunk: Vec<T>,
    neck_norm: LayerNormCache<T>,
}

impl<T: Scalar> ImageEncoder<T> {
    pub fn new<R: Rng>(rng: &mut R, cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let patch_embed = Linear::frozen(rng, cfg.patch_dim(), d, true);
        let pos_embed = normal_vec(rng, cfg.num_tokens() * d, 0.02);
        let blocks = (0..cfg.depth)
            .map(|_| EncoderBlockParams::new(rng, d, cfg.mlp_dim(), cfg.num_heads))
            .collect();
        Self {
            image_size: cfg.image_size,
            patch_size: cfg.patch_size,
            patch_embed,
            pos_embed,
            blocks,
            neck: Linear::frozen(rng, d, cfg.prompt_dim, true),
            neck_norm: LayerNorm::new(cfg.prompt_dim),
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn embed_dim(&self) -> usize {
        self.patch_embed.out
    }

    pub(crate) fn check_image(&self, image: &Image) -> Result<()> {
        if image.height != self.image_size || image.width != self.image_size {
            return Err(Error::Shape(format!(
                "image is {}×{}, model expects {}×{}",
                image.height, image.width, self.image_size, self.image_size
            )));
        }
        if image.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image contains non-finite pixels".into()));
        }
        Ok(())
    }

    fn patchify(&self, image: &Image) -> Vec<T> {
        let p = self.patch_size;
        let g = self.grid();
        let mut out = Vec::with_capacity(g * g * p * p * 3);
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..p {
                    let row = (gy * p + py) * image.width + gx * p;
                    out.extend(
                        image.data[row * 3..(row + p) * 3]
                            .iter()
                            .map(|&v| T::of(v as f64)),
                    );
                }
            }
        }
        out
    }

    pub(crate) fn forward(
        &self,
        image: &Image,
        use_shift: bool,
    ) -> Result<(ImageEmbedding<T>, EncoderCache<T>)> {
        self.check_image(image)?;
        let n = self.grid() * self.grid();
        let patches = self.patchify(image);
        let mut x = self.patch_embed.forward_with(&patches, n, use_shift);
        ops::add_assign(&mut x, &self.pos_embed);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&x, n, use_shift);
            caches.push(c);
            x = y;
        }
        let neck = self.neck.forward_with(&x, n, use_shift);
        let (features, neck_norm) = self.neck_norm.forward(&neck);
        let pixels = image.data.iter().map(|&v| T::of(v as f64)).collect();
        let emb = ImageEmbedding {
            grid: self.grid(),
            embed_dim: self.embed_dim(),
            tokens: x.clone(),
            prompt_dim: self.neck.out,
            features,
            pixels,
        };
        Ok((
            emb,
            EncoderCache {
                patches,
                blocks: caches,
                trunk: x,
                neck_norm,
            },
        ))
    }

    /// Accumulates encoder gradients from the gradient w.r.t. the neck output.
    pub(crate) fn backward(
        &self,
        cache: &EncoderCache<T>,
        d_features: &[T],
        grad: &mut ImageEncoder<T>,
    ) {
        let n = self.grid() * self.grid();
        let dneck = self
            .neck_norm
            .backward(&cache.neck_norm, d_features, &mut grad.neck_norm);
        let mut dx = self
            .neck
            .backward(&cache.trunk, &dneck, n, &mut grad.neck, true)
            .expect("dx requested");
        for (i, block) in self.blocks.iter().enumerate().rev() {
            dx = block.backward(&cache.blocks[i], &dx, n, &mut grad.blocks[i]);
        }
        ops::add_assign(&mut grad.pos_embed, &dx);
        self.patch_embed
            .backward(&cache.patches, &dx, n, &mut grad.patch_embed, false);
    }
}

impl<T: Scalar> ParamSet<T> for ImageEncoder<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.patch_embed.collect(&join(prefix, "patch_embed"), out);
        push(
            out,
            prefix,
            "pos_embed",
            vec![self.grid() * self.grid(), self.embed_dim()],
            &self.pos_embed,
            true,
        );
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.neck.collect(&join(prefix, "neck.proj"), out);
        self.neck_norm.collect(&join(prefix, "neck.ln"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.patch_embed
            .collect_mut(&join(prefix, "patch_embed"), out);
        push_mut(out, prefix, "pos_embed", &mut self.pos_embed, true);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.neck.collect_mut(&join(prefix, "neck.proj"), out);
        self.neck_norm.collect_mut(&join(prefix, "neck.ln"), out);
    }

    fn zero_grad(&self) -> Self {
        Self {
            image_size: self.image_size,
            patch_size: self.patch_size,
            patch_embed: self.patch_embed.zero_grad(),
            pos_embed: vec![T::zero(); self.pos_embed.len()],
            blocks: self.blocks.iter().map(|b| b.zero_grad()).collect(),
            neck: self.neck.zero_grad(),
            neck_norm: self.neck_norm.zero_grad(),
        }
    }
}
